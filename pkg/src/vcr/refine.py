"""View scoring, margin-based selection, and scale-weighted feature merging.

Selection works on raw temperature-scaled logits, never on softmax
probabilities: with many classes the probabilities crowd toward uniform
and their differences vanish at float32 resolution while the logits stay
separable.  The margin of a view is top1 - top2 of its logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import TextClassifier
from .errors import InvalidArgumentError
from .geometry import GLOBAL, CropRect, ScaleSet, sample_crops
from .rng import SplitMix64, image_seed, substream_seed, tagged_seed

CRITERIA = ("max_margin", "min_margin", "min_entropy", "random")
WEIGHTINGS = ("scale_weighted", "uniform", "global_only")


def zero_shot_logits(features: np.ndarray, clf: TextClassifier) -> np.ndarray:
    """Cosine-over-temperature logits; rows for a batch, a vector for one.

    Inputs are unit-norm by contract, so cosine is the plain dot product.
    Accumulation is float64.
    """
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f = f[None, :]
    if f.shape[1] != clf.dim:
        raise InvalidArgumentError(f"feature dim {f.shape[1]} != classifier dim {clf.dim}")
    logits = f @ clf.weights.T.astype(np.float64) / clf.tau
    return logits[0] if single else logits


def prediction_margin(logits: np.ndarray) -> float:
    """top1 - top2 over raw logits; nonnegative, shift-invariant."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise InvalidArgumentError("margin needs at least 2 class logits")
    top2 = np.partition(v, -2)[-2:]
    return float(top2[1] - top2[0])


def prediction_margins(logits: np.ndarray) -> np.ndarray:
    """Row-wise margins for a (m, C) logits matrix."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] < 2:
        raise InvalidArgumentError("margins need a (m, C>=2) logits matrix")
    top2 = np.partition(v, -2, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def softmax_entropies(logits: np.ndarray) -> np.ndarray:
    """Natural-log Shannon entropy of softmax per row, computed stably."""
    v = np.asarray(logits, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    # H = log Z - sum(l_i e^{l_i}) / Z over shifted logits
    return np.log(z) - (shifted * e).sum(axis=1) / z


def select_view(view_logits, criterion: str, tie_seed: int = 0) -> tuple[int, float]:
    """Pick one view index from a scale's logits under the given criterion.

    Deterministic criteria break ties toward the lowest index; `random`
    draws uniformly from the stream seeded by `tie_seed`.  Returns the
    index and the criterion's objective value at it.
    """
    logits = np.asarray(view_logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise InvalidArgumentError("need a non-empty (m, C) logits matrix")
    if logits.shape[1] < 2:
        raise InvalidArgumentError("need at least 2 classes to select")
    if criterion == "max_margin":
        margins = prediction_margins(logits)
        k = int(np.argmax(margins))
        return k, float(margins[k])
    if criterion == "min_margin":
        margins = prediction_margins(logits)
        k = int(np.argmin(margins))
        return k, float(margins[k])
    if criterion == "min_entropy":
        ent = softmax_entropies(logits)
        k = int(np.argmin(ent))
        return k, float(ent[k])
    if criterion == "random":
        k = SplitMix64(tie_seed).bounded(logits.shape[0])
        return k, float(prediction_margins(logits)[k])
    raise InvalidArgumentError(f"unknown selection criterion {criterion!r}")


@dataclass(frozen=True)
class ScaleSelection:
    scale: float
    index: int
    margin: float
    crop: CropRect


@dataclass(frozen=True)
class SelectionResult:
    criterion: str
    per_scale: tuple[ScaleSelection, ...]

    def as_json(self) -> dict:
        return {
            "criterion": self.criterion,
            "per_scale": [
                {"scale": s.scale, "index": s.index, "margin": s.margin, "crop": s.crop.as_json()}
                for s in self.per_scale
            ],
        }


@dataclass(frozen=True)
class RefinedFeature:
    vector: np.ndarray  # unit float32
    selection: SelectionResult
    weighting: str


def merge_features(selected, weighting: str) -> np.ndarray:
    """Combine per-scale unit features into one unit feature.

    scale_weighted: sum(s_i * f_i) / sum(s_i); uniform: plain mean; both
    renormalized.  global_only returns the scale-1.0 entry untouched, and a
    single-entry list is returned untouched too, so the one-scale pipeline
    reduces to the global feature bit-for-bit.
    """
    entries = list(selected)
    if not entries:
        raise InvalidArgumentError("cannot merge an empty feature list")
    scales = [float(s) for s, _ in entries]
    feats = [np.asarray(f) for _, f in entries]
    dims = {f.shape for f in feats}
    if len(dims) != 1 or feats[0].ndim != 1:
        raise InvalidArgumentError(f"mixed feature dimensions: {sorted(dims)}")
    if len(set(scales)) != len(scales):
        raise InvalidArgumentError("duplicate scales in merge input")
    if any(not (0.0 < s <= 1.0) for s in scales):
        raise InvalidArgumentError("scales must lie in (0, 1]")

    if weighting == "global_only":
        for s, f in entries:
            if float(s) == 1.0:
                return np.asarray(f, dtype=np.float32)
        raise InvalidArgumentError("global_only weighting needs a scale-1.0 entry")
    if weighting not in ("scale_weighted", "uniform"):
        raise InvalidArgumentError(f"unknown weighting {weighting!r}")
    if len(entries) == 1:
        return np.asarray(feats[0], dtype=np.float32)

    F = np.stack(feats).astype(np.float64)
    if weighting == "scale_weighted":
        w = np.array(scales, dtype=np.float64)
        merged = w @ F / w.sum()
    else:
        merged = F.mean(axis=0)
    norm = float(np.linalg.norm(merged))
    if norm < 1e-12:
        raise InvalidArgumentError("merged feature has near-zero norm")
    return (merged / norm).astype(np.float32)


def decompose_crops(
    image_id: str, width: int, height: int, scale_set: ScaleSet, m: int, seed: int
) -> list[tuple[float, list[CropRect]]]:
    """Sampled crops per local scale; stream i belongs to scale position i."""
    seed_i = image_seed(seed, image_id)
    out = []
    for i, scale in enumerate(scale_set.local_scales):
        out.append((scale, sample_crops(width, height, scale, m, substream_seed(seed_i, i))))
    return out


def refine_image(
    backend,
    clf: TextClassifier,
    image_id: str,
    dims: tuple[int, int],
    scale_set: ScaleSet,
    m: int,
    criterion: str = "max_margin",
    weighting: str = "scale_weighted",
    seed: int = 0,
) -> RefinedFeature:
    """Full per-image pipeline: decompose, score, select, merge.

    Equivalent to sample_crops -> encode -> logits -> select per local
    scale, plus the untouched global view, merged under `weighting`.
    Backend lookup failures propagate with the offending (image, crop).
    """
    if criterion not in CRITERIA:
        raise InvalidArgumentError(f"unknown selection criterion {criterion!r}")
    if weighting not in WEIGHTINGS:
        raise InvalidArgumentError(f"unknown weighting {weighting!r}")
    width, height = dims
    seed_i = image_seed(seed, image_id)

    chosen: list[tuple[float, np.ndarray]] = []
    selections: list[ScaleSelection] = []
    for i, scale in enumerate(scale_set.local_scales):
        crops = sample_crops(width, height, scale, m, substream_seed(seed_i, i))
        feats = backend.encode_views(image_id, crops)
        logits = zero_shot_logits(feats, clf)
        k, _ = select_view(logits, criterion, tie_seed=tagged_seed(seed_i, f"select/{i}"))
        margin = float(prediction_margins(logits)[k])
        selections.append(ScaleSelection(scale=scale, index=k, margin=margin, crop=crops[k]))
        chosen.append((scale, feats[k]))

    global_feat = backend.encode_views(image_id, [GLOBAL])[0]
    chosen.append((1.0, global_feat))

    merged = merge_features(chosen, weighting)
    return RefinedFeature(
        vector=merged,
        selection=SelectionResult(criterion=criterion, per_scale=tuple(selections)),
        weighting=weighting,
    )
