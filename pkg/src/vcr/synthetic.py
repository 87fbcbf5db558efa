"""Planted-disc scenes with an exactly computable crop encoder.

Each scene is one labeled object disc plus distractor discs on a neutral
background.  A crop encodes to the normalized mixture

    a_obj * P[y] + sum_j a_dj * (P[u_j] + P[v_j]) / sqrt(2) + a_bg * b
        + noise_amp * eta

where the a's are exact disc/crop overlap-area fractions, P are the class
prototype rows, b is a fixed unit background direction orthogonal to every
prototype, and eta is a unit Gaussian direction seeded per (scene, crop).
Distractors carry an equal two-class signature, so their views score
confidently ambiguous: high activation, near-zero top1-top2 gap.  That
plants object views as the only high-margin content, which is what the
selection stage is supposed to find.

Overlap areas use the exact circle/rectangle intersection via the corner
function F(x, y) = area of the disc within the quadrant {u <= x, v <= y};
inclusion-exclusion over the four rectangle corners gives the overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import TextClassifier, build_text_classifier, normalize
from .errors import InvalidArgumentError, NotFoundError
from .geometry import GLOBAL, CropRect
from .rng import SplitMix64, fnv1a64, gaussian_matrix, mix64


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    r: float


@dataclass(frozen=True)
class SyntheticScene:
    image_id: str
    width: int
    height: int
    object_class: int
    object_disc: Disc
    distractors: tuple[Disc, ...]
    noise_seed: int


def _corner_area(x: np.ndarray, y: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Area of {u <= x, v <= y} within the disc of radius r at the origin.

    Broadcasts over arrays (r included).  The five antiderivative points
    T(u) = u*s(u) + r^2*asin(u/r) are evaluated in one stacked pass;
    T(-c) = -T(c) exactly (IEEE negation and asin are sign-symmetric), so
    only T(c) is computed.
    """
    r = np.asarray(r, dtype=np.float64)
    r2 = r * r
    x = np.minimum(np.maximum(np.asarray(x, dtype=np.float64), -r), r)
    y = np.minimum(np.maximum(np.asarray(y, dtype=np.float64), -r), r)
    c = np.sqrt(np.maximum(r2 - y * y, 0.0))

    u_left = np.minimum(x, -c)
    u_mid = np.minimum(x, c)
    xm = np.maximum(u_mid, -c)
    U = np.stack(np.broadcast_arrays(u_left, u_mid, x, c, xm))
    s = np.sqrt(np.maximum(r2 - U * U, 0.0))
    T = U * s + r2 * np.arcsin(np.minimum(np.maximum(U / r, -1.0), 1.0))
    T_left, T_mid, T_x, T_c, T_xm = T

    half = 0.5 * np.pi * r2
    # y >= 0: the slice is 2*s(u) outside |u| <= c and y + s(u) inside it.
    left = T_left + half
    mid = np.where(x > -c, y * (u_mid + c) + 0.5 * T_mid + 0.5 * T_c, 0.0)
    right = np.where(x > c, T_x - T_c, 0.0)
    pos = left + mid + right
    # y < 0: the slice y + s(u) is nonzero only inside |u| <= c.
    neg = y * (xm + c) + 0.5 * T_xm + 0.5 * T_c
    return np.where(y >= 0.0, pos, np.maximum(neg, 0.0))


def _discs_rects_overlap(discs, x0, y0, x1, y1) -> np.ndarray:
    """Exact overlap areas, (num_discs, num_rects), one stacked evaluation."""
    cx = np.array([[d.cx] for d in discs], dtype=np.float64)
    cy = np.array([[d.cy] for d in discs], dtype=np.float64)
    r = np.array([[d.r] for d in discs], dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)[None, :] - cx
    x1 = np.asarray(x1, dtype=np.float64)[None, :] - cx
    y0 = np.asarray(y0, dtype=np.float64)[None, :] - cy
    y1 = np.asarray(y1, dtype=np.float64)[None, :] - cy
    xs = np.stack(np.broadcast_arrays(x1, x0, x1, x0))
    ys = np.stack(np.broadcast_arrays(y1, y1, y0, y0))
    F = _corner_area(xs, ys, r[None, :, :])
    area = F[0] - F[1] - F[2] + F[3]
    area = np.maximum(area, 0.0)
    return np.where(r > 0.0, area, 0.0)


def disc_rect_overlap_many(disc: Disc, x0, y0, x1, y1) -> np.ndarray:
    """Exact overlap area between one disc and many rectangles (arrays)."""
    if disc.r <= 0.0:
        return np.zeros(np.broadcast(np.asarray(x0), np.asarray(x1)).shape, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64) - disc.cx
    x1 = np.asarray(x1, dtype=np.float64) - disc.cx
    y0 = np.asarray(y0, dtype=np.float64) - disc.cy
    y1 = np.asarray(y1, dtype=np.float64) - disc.cy
    r = float(disc.r)
    area = (
        _corner_area(x1, y1, r)
        - _corner_area(x0, y1, r)
        - _corner_area(x1, y0, r)
        + _corner_area(x0, y0, r)
    )
    return np.maximum(area, 0.0)


def disc_rect_overlap(disc: Disc, x0: float, y0: float, x1: float, y1: float) -> float:
    return float(disc_rect_overlap_many(disc, [x0], [y0], [x1], [y1])[0])


def background_vector(prototypes: np.ndarray) -> np.ndarray:
    """Fixed unit direction orthogonalized against every prototype row."""
    C, d = prototypes.shape
    if d <= C:
        raise InvalidArgumentError(f"need dim > num_classes to fit a background axis ({d} <= {C})")
    raw = SplitMix64(fnv1a64("background-direction")).gaussian_block(d)
    P = prototypes.astype(np.float64)
    resid = raw - P.T @ _lstsq_coeffs(P, raw)
    if np.linalg.norm(resid) < 1e-6:
        raise InvalidArgumentError("background direction degenerate for these prototypes")
    return normalize(resid)


def _lstsq_coeffs(P: np.ndarray, v: np.ndarray) -> np.ndarray:
    # projection coefficients of v onto the row space of P (rows near-orthonormal)
    gram = P @ P.T
    return np.linalg.solve(gram, P @ v)


def distractor_classes(image_id: str, j: int, num_classes: int) -> tuple[int, int]:
    """Two distinct classes assigned deterministically to distractor j.

    Pairs are cut from a per-image class permutation, so distractors of one
    image carry disjoint pairs as long as 2*(j+1) <= num_classes.  Without
    disjointness a class recurring across pairs would accumulate mass and
    dominate whole images outright instead of planting near-zero-margin
    ambiguity.
    """
    rng = SplitMix64(fnv1a64(f"{image_id}|distractor-classes"))
    perm = list(range(num_classes))
    for i in range(num_classes - 1):  # Fisher-Yates on the package stream
        k = i + rng.bounded(num_classes - i)
        perm[i], perm[k] = perm[k], perm[i]
    u = perm[(2 * j) % num_classes]
    v = perm[(2 * j + 1) % num_classes]
    if u == v:  # only possible when wrapping an odd class count
        v = perm[(2 * j + 2) % num_classes]
    return u, v


def orthonormal_prototypes(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Seeded orthonormal class prototypes via modified Gram-Schmidt."""
    if num_classes < 2:
        raise InvalidArgumentError("need at least 2 classes")
    if dim <= num_classes:
        raise InvalidArgumentError("need dim > num_classes")
    raw = gaussian_matrix(
        np.array([mix64(seed + k + 1) for k in range(num_classes)], dtype=np.uint64), dim
    )
    basis = []
    for row in raw:
        v = row.copy()
        for b in basis:
            v -= (v @ b) * b
        n = np.linalg.norm(v)
        if n < 1e-9:
            raise InvalidArgumentError("degenerate prototype draw")
        basis.append(v / n)
    return np.stack(basis).astype(np.float32)


def _crop_noise_seed(scene: SyntheticScene, crop: CropRect | str) -> int:
    key = GLOBAL if crop == GLOBAL else crop.key()
    return mix64(scene.noise_seed ^ fnv1a64(f"{scene.image_id}|{key}"))


class SyntheticBackend:
    """Deterministic encoder over a dict of scenes; no pixels involved."""

    def __init__(self, scenes: dict[str, SyntheticScene], classifier: TextClassifier, noise_amp: float):
        if noise_amp < 0:
            raise InvalidArgumentError(f"noise amplitude must be >= 0, got {noise_amp}")
        self.scenes = scenes
        self.classifier = classifier
        self.noise_amp = float(noise_amp)
        self._P = classifier.weights.astype(np.float64)
        self._b = background_vector(classifier.weights).astype(np.float64)
        # per-scene mixing matrix rows: object class, distractor pairs, background
        self._signature_cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.classifier.dim

    def image_dims(self, image_id: str) -> tuple[int, int]:
        scene = self._scene(image_id)
        return scene.width, scene.height

    def _scene(self, image_id: str) -> SyntheticScene:
        try:
            return self.scenes[image_id]
        except KeyError:
            raise NotFoundError(f"unknown image id {image_id!r}") from None

    def _signatures(self, scene: SyntheticScene) -> np.ndarray:
        """(1 + n_distractors + 1, d) rows: object, each distractor, background."""
        cached = self._signature_cache.get(scene.image_id)
        if cached is not None:
            return cached
        C = self.classifier.num_classes
        rows = [self._P[scene.object_class]]
        for j in range(len(scene.distractors)):
            u, v = distractor_classes(scene.image_id, j, C)
            rows.append((self._P[u] + self._P[v]) / np.sqrt(2.0))
        rows.append(self._b)
        sig = np.stack(rows)
        self._signature_cache[scene.image_id] = sig
        return sig

    def encode_views(self, image_id: str, crops) -> np.ndarray:
        """Encode a batch of crops of one image; rows are unit float32."""
        scene = self._scene(image_id)
        crops = list(crops)
        rects = []
        for c in crops:
            if c == GLOBAL:
                rects.append((0.0, 0.0, float(scene.width), float(scene.height)))
            else:
                c.validate_within(scene.width, scene.height)
                rc = c.mirrored(scene.width) if c.hflip else c
                rects.append((float(rc.x), float(rc.y), float(rc.x + rc.w), float(rc.y + rc.h)))
        x0, y0, x1, y1 = (np.array(v, dtype=np.float64) for v in zip(*rects))
        areas = (x1 - x0) * (y1 - y0)

        discs = [scene.object_disc, *scene.distractors]
        fracs = (_discs_rects_overlap(discs, x0, y0, x1, y1) / areas[None, :]).T
        bg = np.clip(1.0 - fracs.sum(axis=1), 0.0, 1.0)
        coeffs = np.concatenate([fracs, bg[:, None]], axis=1)
        mixed = coeffs @ self._signatures(scene)

        if self.noise_amp > 0.0:
            seeds = np.array(
                [_crop_noise_seed(scene, c) for c in crops], dtype=np.uint64
            )
            eta = gaussian_matrix(seeds, self.dim)
            eta /= np.linalg.norm(eta, axis=1, keepdims=True)
            mixed = mixed + self.noise_amp * eta

        norms = np.linalg.norm(mixed, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise InvalidArgumentError("degenerate synthetic mixture (zero norm)")
        return (mixed / norms).astype(np.float32)

    def encode_view(self, image_id: str, crop) -> np.ndarray:
        return self.encode_views(image_id, [crop])[0]


def synthetic_encode(
    scene: SyntheticScene,
    crop: CropRect | str,
    prototypes: TextClassifier,
    noise_amp: float,
) -> np.ndarray:
    """One-shot encode of a single crop; see SyntheticBackend for the model."""
    backend = SyntheticBackend({scene.image_id: scene}, prototypes, noise_amp)
    return backend.encode_view(scene.image_id, crop)


def make_prototype_classifier(num_classes: int, dim: int, seed: int, tau: float) -> TextClassifier:
    names = [f"class{i}" for i in range(num_classes)]
    return build_text_classifier(names, orthonormal_prototypes(num_classes, dim, seed), tau)


def generate_scenes(
    num_classes: int,
    num_images: int,
    distractors_per_image: int,
    width: int,
    height: int,
    seed: int,
    object_radius: tuple[float, float] = (14.0, 30.0),
    distractor_radius: tuple[float, float] = (16.0, 40.0),
    core_distractors: int = 2,
    core_radius_frac: tuple[float, float] = (0.45, 0.7),
    core_offset_frac: float = 0.3,
    outer_ratio: tuple[float, float] | None = None,
) -> list[SyntheticScene]:
    """Seeded scene sampler planting both perception biases.

    The first `core_distractors` distractors overlap the object disc (their
    centers sit near the object center, radii a fraction of the object's):
    zoomed-in views of the object then mix in distractor signatures, and
    whenever the hash-assigned class pairs of two core distractors share a
    class, those views look confidently wrong (the component-bias analogue).
    Remaining distractors are placed away from every other disc, so their
    area pollutes the global view only (the environmental-bias analogue).
    When `outer_ratio` is given, each outer distractor radius is drawn as
    that multiple of the object radius (clamped to `distractor_radius`),
    which pins how decisively the distractor can dominate the global view.
    """
    if num_classes < 2:
        raise InvalidArgumentError("need at least 2 classes")
    if num_images < 1:
        raise InvalidArgumentError("need at least 1 image")
    scenes = []
    for i in range(num_images):
        image_id = f"img{i:05d}"
        rng = SplitMix64(mix64(seed ^ fnv1a64(f"scene|{image_id}")))
        label = i % num_classes

        def draw_disc(r_lo, r_hi):
            r = r_lo + (r_hi - r_lo) * rng.uniform()
            r = min(r, (min(width, height) - 2.0) / 2.0)
            cx = r + (width - 2.0 * r) * rng.uniform()
            cy = r + (height - 2.0 * r) * rng.uniform()
            return Disc(cx=cx, cy=cy, r=r)

        obj = draw_disc(*object_radius)
        distract = []
        n_core = min(core_distractors, distractors_per_image)
        for _ in range(n_core):
            frac = core_radius_frac[0] + (core_radius_frac[1] - core_radius_frac[0]) * rng.uniform()
            # offset the center inside the object so the disc stays within it
            angle = 2.0 * np.pi * rng.uniform()
            dist = core_offset_frac * obj.r * rng.uniform()
            distract.append(
                Disc(cx=obj.cx + dist * np.cos(angle), cy=obj.cy + dist * np.sin(angle), r=frac * obj.r)
            )
        if outer_ratio is None:
            outer_lo, outer_hi = distractor_radius
        else:
            lo = min(max(outer_ratio[0] * obj.r, distractor_radius[0]), distractor_radius[1])
            hi = min(max(outer_ratio[1] * obj.r, distractor_radius[0]), distractor_radius[1])
            outer_lo, outer_hi = lo, hi
        outer_obstacles = [obj]
        for _ in range(distractors_per_image - n_core):
            disc = draw_disc(outer_lo, outer_hi)
            for _ in range(100):
                if all(
                    (disc.cx - p.cx) ** 2 + (disc.cy - p.cy) ** 2 >= (disc.r + p.r) ** 2
                    for p in outer_obstacles
                ):
                    break
                disc = draw_disc(outer_lo, outer_hi)
            outer_obstacles.append(disc)
            distract.append(disc)
        scenes.append(
            SyntheticScene(
                image_id=image_id,
                width=width,
                height=height,
                object_class=label,
                object_disc=obj,
                distractors=tuple(distract),
                noise_seed=mix64(seed ^ fnv1a64(f"noise|{image_id}")),
            )
        )
    return scenes


def scenes_to_dataset_manifest(scenes, class_names) -> dict:
    return {
        "classes": list(class_names),
        "images": [
            {"id": s.image_id, "label": s.object_class, "width": s.width, "height": s.height}
            for s in scenes
        ],
    }
