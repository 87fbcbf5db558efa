"""Few-shot episodes, the ablation mode matrix, and benchmark runs.

Mode grammar (the strings accepted by run_ablation and the CLI):

    global_baseline          global feature only
    ten_crop                 4 corners + center, each plus hflip, averaged
    multi_crop_avg           m views drawn (scale, position) from the pool, averaged
    random_per_scale_avg     one random view per scale, averaged
    per_scale:S              a single random view at scale S
    selected_uniform_avg     max-margin view per scale, uniform average
    selected_scale_weighted  max-margin view per scale, scale-weighted merge
    criterion:NAME           scale-weighted merge under another criterion
    n:K                      selected_scale_weighted with a K-scale decomposition

Random modes are repeated `repeats` times (default 10) and report the mean.
Every random draw is keyed by (seed, image id, mode, repetition), so results
are identical for any worker count or evaluation order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .adapter import adapter_logits, build_cache, cache_logits
from .embeddings import TextClassifier
from .errors import InvalidArgumentError
from .geometry import GLOBAL, ScaleSet, build_scale_set, sample_crops, ten_crop_rects
from .refine import merge_features, select_view, zero_shot_logits
from .rng import SplitMix64, image_seed, mix64, substream_seed, tagged_seed
from .synthetic import (
    SyntheticBackend,
    generate_scenes,
    make_prototype_classifier,
    scenes_to_dataset_manifest,
)


@dataclass(frozen=True)
class Episode:
    shots: int
    train: tuple[tuple[str, int], ...]
    val: tuple[tuple[str, int], ...]
    test: tuple[tuple[str, int], ...]
    seed: int


def build_fewshot_episode(manifest: dict, shots: int, seed: int) -> Episode:
    """Per-class sampling without replacement; remaining instances test.

    Each class draws from its own stream keyed by (seed, class index), so
    the episode is independent of manifest iteration order elsewhere.
    """
    if shots < 1:
        raise InvalidArgumentError(f"shots must be >= 1, got {shots}")
    classes = manifest["classes"]
    per_class: dict[int, list[str]] = {c: [] for c in range(len(classes))}
    for img in manifest["images"]:
        per_class[int(img["label"])].append(img["id"])
    train: list[tuple[str, int]] = []
    test: list[tuple[str, int]] = []
    for c in range(len(classes)):
        ids = per_class[c]
        if len(ids) < shots:
            raise InvalidArgumentError(
                f"class {classes[c]!r} has {len(ids)} instances, needs {shots}"
            )
        rng = SplitMix64(tagged_seed(seed, f"episode/class/{c}"))
        order = list(range(len(ids)))
        for j in range(shots):  # partial Fisher-Yates
            pick = j + rng.bounded(len(order) - j)
            order[j], order[pick] = order[pick], order[j]
        chosen = set(order[:shots])
        for i, image_id in enumerate(ids):
            (train if i in chosen else test).append((image_id, c))
    return Episode(shots=shots, train=tuple(train), val=(), test=tuple(test), seed=seed)


def evaluate(predictions, labels) -> dict:
    """Top-1 accuracy, per-class accuracy, and counts."""
    pred = np.asarray(list(predictions), dtype=np.int64)
    y = np.asarray(list(labels), dtype=np.int64)
    if pred.size == 0 or pred.shape != y.shape:
        raise InvalidArgumentError("predictions/labels empty or mismatched")
    correct = pred == y
    num_classes = int(y.max()) + 1
    per_class = []
    for c in range(num_classes):
        mask = y == c
        per_class.append(float(correct[mask].mean()) if mask.any() else 0.0)
    return {
        "top1": float(correct.mean()),
        "per_class": per_class,
        "counts": {"test": int(y.size), "correct": int(correct.sum())},
    }


@dataclass(frozen=True)
class ModeSpec:
    name: str
    kind: str
    criterion: str = "max_margin"
    weighting: str = "scale_weighted"
    scale: float | None = None
    n_override: int | None = None

    @property
    def is_random(self) -> bool:
        if self.kind == "per_scale":
            return self.scale != 1.0
        return self.kind in ("multi_crop_avg", "random_per_scale_avg") or (
            self.kind == "criterion" and self.criterion == "random"
        )


def parse_mode(mode: str) -> ModeSpec:
    name = mode.strip()
    if name == "global_baseline":
        return ModeSpec(name=name, kind="global_baseline", weighting="global_only")
    if name == "ten_crop":
        return ModeSpec(name=name, kind="ten_crop", weighting="uniform")
    if name == "multi_crop_avg":
        return ModeSpec(name=name, kind="multi_crop_avg", weighting="uniform")
    if name == "random_per_scale_avg":
        return ModeSpec(name=name, kind="random_per_scale_avg", weighting="uniform")
    if name == "selected_uniform_avg":
        return ModeSpec(name=name, kind="selected", weighting="uniform")
    if name == "selected_scale_weighted":
        return ModeSpec(name=name, kind="selected", weighting="scale_weighted")
    if name.startswith("per_scale:"):
        scale = float(name.split(":", 1)[1])
        if not (0.0 < scale <= 1.0):
            raise InvalidArgumentError(f"per_scale value must be in (0, 1], got {scale}")
        return ModeSpec(name=name, kind="per_scale", scale=scale)
    if name.startswith("criterion:"):
        criterion = name.split(":", 1)[1]
        if criterion not in ("max_margin", "min_margin", "min_entropy", "random"):
            raise InvalidArgumentError(f"unknown criterion in mode {name!r}")
        return ModeSpec(name=name, kind="criterion", criterion=criterion)
    if name.startswith("n:"):
        n = int(name.split(":", 1)[1])
        if n < 1:
            raise InvalidArgumentError(f"n must be >= 1 in mode {name!r}")
        return ModeSpec(name=name, kind="n_variant", n_override=n)
    raise InvalidArgumentError(f"unknown ablation mode {name!r}")


@dataclass
class AblationConfig:
    n: int = 10
    m: int = 100
    seed: int = 0
    alpha: float = 1.0
    beta: float = 5.0
    repeats: int = 10
    workers: int = 1
    refine_cache: bool = False
    cache_criterion: str = "max_margin"
    cache_weighting: str = "scale_weighted"


@dataclass
class EvalReport:
    mode: str
    params: dict
    top1: float
    per_class: list[float]
    counts: dict
    repeats: int
    wall_time: float | None = None

    def results_payload(self) -> dict:
        return {
            "top1": self.top1,
            "per_class": self.per_class,
            "counts": self.counts,
            "repeats": self.repeats,
        }

    def as_json(self, include_timing: bool = False) -> dict:
        out = {"mode": self.mode, "params": self.params, "results": self.results_payload()}
        if include_timing and self.wall_time is not None:
            out["timing"] = {"wall_time": self.wall_time}
        return out


class _ImagePool:
    """Per-image cache of crops, features and logits, one entry per scale."""

    def __init__(self, backend, clf, image_id, dims, m, seed):
        self.backend = backend
        self.clf = clf
        self.image_id = image_id
        self.dims = dims
        self.m = m
        self.seed_i = image_seed(seed, image_id)
        self._scales: dict[int, dict] = {}  # (n, scale index) -> entry
        self._global: np.ndarray | None = None
        self._ten: np.ndarray | None = None

    def global_feature(self) -> np.ndarray:
        if self._global is None:
            self._global = self.backend.encode_views(self.image_id, [GLOBAL])[0]
        return self._global

    def scale_entry(self, scale_set: ScaleSet, i: int) -> dict:
        key = (scale_set.n, i)
        entry = self._scales.get(key)
        if entry is None:
            scale = scale_set.local_scales[i]
            crops = sample_crops(
                self.dims[0], self.dims[1], scale, self.m, substream_seed(self.seed_i, i)
            )
            feats = self.backend.encode_views(self.image_id, crops)
            logits = zero_shot_logits(feats, self.clf)
            entry = {"scale": scale, "crops": crops, "feats": feats, "logits": logits}
            self._scales[key] = entry
        return entry

    def ten_crop_feature(self) -> np.ndarray:
        if self._ten is None:
            rects = ten_crop_rects(*self.dims)
            feats = self.backend.encode_views(self.image_id, rects)
            merged = feats.astype(np.float64).mean(axis=0)
            self._ten = (merged / np.linalg.norm(merged)).astype(np.float32)
        return self._ten

    def selected_feature(self, scale_set: ScaleSet, criterion: str, weighting: str) -> np.ndarray:
        chosen = []
        for i in range(scale_set.n - 1):
            entry = self.scale_entry(scale_set, i)
            k, _ = select_view(
                entry["logits"], criterion, tie_seed=tagged_seed(self.seed_i, f"select/{i}")
            )
            chosen.append((entry["scale"], entry["feats"][k]))
        chosen.append((1.0, self.global_feature()))
        return merge_features(chosen, weighting)

    def random_selected_feature(
        self, scale_set: ScaleSet, weighting: str, mode_name: str, rep: int
    ) -> np.ndarray:
        rng = SplitMix64(tagged_seed(self.seed_i, f"mode/{mode_name}/rep/{rep}"))
        chosen = []
        for i in range(scale_set.n - 1):
            entry = self.scale_entry(scale_set, i)
            k = rng.bounded(self.m)
            chosen.append((entry["scale"], entry["feats"][k]))
        chosen.append((1.0, self.global_feature()))
        return merge_features(chosen, weighting)

    def per_scale_feature(self, scale_set: ScaleSet, scale: float, mode_name: str, rep: int) -> np.ndarray:
        if scale == 1.0:
            return self.global_feature()
        idx = scale_set.local_scales.index(scale)
        entry = self.scale_entry(scale_set, idx)
        rng = SplitMix64(tagged_seed(self.seed_i, f"mode/{mode_name}/rep/{rep}"))
        return entry["feats"][rng.bounded(self.m)]

    def multi_crop_feature(self, scale_set: ScaleSet, mode_name: str, rep: int) -> np.ndarray:
        rng = SplitMix64(tagged_seed(self.seed_i, f"mode/{mode_name}/rep/{rep}"))
        feats = []
        for _ in range(self.m):
            s_idx = rng.bounded(scale_set.n)
            if s_idx == scale_set.n - 1:
                feats.append(self.global_feature())
            else:
                entry = self.scale_entry(scale_set, s_idx)
                feats.append(entry["feats"][rng.bounded(self.m)])
        merged = np.stack(feats).astype(np.float64).mean(axis=0)
        return (merged / np.linalg.norm(merged)).astype(np.float32)


def _mode_features(pool: _ImagePool, spec: ModeSpec, scale_set: ScaleSet, repeats: int):
    """One feature for deterministic modes, else one per repetition."""
    if spec.kind == "global_baseline":
        return [pool.global_feature()]
    if spec.kind == "ten_crop":
        return [pool.ten_crop_feature()]
    if spec.kind == "selected":
        return [pool.selected_feature(scale_set, "max_margin", spec.weighting)]
    if spec.kind == "criterion":
        if spec.criterion == "random":
            return [
                pool.random_selected_feature(scale_set, "scale_weighted", spec.name, r)
                for r in range(repeats)
            ]
        return [pool.selected_feature(scale_set, spec.criterion, "scale_weighted")]
    if spec.kind == "n_variant":
        sub = build_scale_set(spec.n_override)
        return [pool.selected_feature(sub, "max_margin", "scale_weighted")]
    if spec.kind == "random_per_scale_avg":
        return [
            pool.random_selected_feature(scale_set, "uniform", spec.name, r)
            for r in range(repeats)
        ]
    if spec.kind == "multi_crop_avg":
        return [pool.multi_crop_feature(scale_set, spec.name, r) for r in range(repeats)]
    if spec.kind == "per_scale":
        if spec.scale == 1.0:
            return [pool.global_feature()]
        return [
            pool.per_scale_feature(scale_set, spec.scale, spec.name, r) for r in range(repeats)
        ]
    raise InvalidArgumentError(f"unhandled mode kind {spec.kind!r}")


def _map_ordered(fn, items, workers: int):
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _train_features(backend, clf, episode: Episode, config: AblationConfig) -> list[np.ndarray]:
    from .refine import refine_image  # local import to keep module load light

    feats = []
    for image_id, _ in episode.train:
        if config.refine_cache:
            scale_set = build_scale_set(config.n)
            rf = refine_image(
                backend,
                clf,
                image_id,
                backend.image_dims(image_id),
                scale_set,
                config.m,
                criterion=config.cache_criterion,
                weighting=config.cache_weighting,
                seed=config.seed,
            )
            feats.append(rf.vector)
        else:
            feats.append(backend.encode_views(image_id, [GLOBAL])[0])
    return feats


def run_ablation(
    episode: Episode, backend, clf: TextClassifier, modes, config: AblationConfig
) -> list[EvalReport]:
    """One report per mode, all from the same episode, cache, and seed."""
    specs = [parse_mode(m) for m in modes]
    scale_set = build_scale_set(config.n)
    labels = [label for _, label in episode.test]
    if not labels:
        raise InvalidArgumentError("episode has an empty test split")

    cache = build_cache(
        _train_features(backend, clf, episode, config),
        [label for _, label in episode.train],
        clf.num_classes,
    )

    def per_image(item):
        image_id, _ = item
        pool = _ImagePool(
            backend, clf, image_id, backend.image_dims(image_id), config.m, config.seed
        )
        return [_mode_features(pool, spec, scale_set, config.repeats) for spec in specs]

    started = time.perf_counter()
    all_feats = _map_ordered(per_image, episode.test, config.workers)
    elapsed = time.perf_counter() - started

    reports = []
    for s_idx, spec in enumerate(specs):
        reps = len(all_feats[0][s_idx])
        rep_results = []
        for r in range(reps):
            F = np.stack([all_feats[v][s_idx][r] for v in range(len(episode.test))])
            clip = zero_shot_logits(F, clf)
            scores = cache_logits(F, cache, config.beta)
            pred = np.argmax(adapter_logits(clip, scores, config.alpha), axis=1)
            rep_results.append(evaluate(pred, labels))
        top1 = float(np.mean([r["top1"] for r in rep_results]))
        per_class = np.mean([r["per_class"] for r in rep_results], axis=0).tolist()
        reports.append(
            EvalReport(
                mode=spec.name,
                params={
                    "criterion": spec.criterion,
                    "weighting": spec.weighting,
                    "n": spec.n_override or config.n,
                    "m": config.m,
                    "shots": episode.shots,
                    "alpha": config.alpha,
                    "beta": config.beta,
                    "seed": config.seed,
                },
                top1=top1,
                per_class=per_class,
                counts={"test": len(labels), "classes": clf.num_classes},
                repeats=reps,
                wall_time=elapsed / max(len(specs), 1),
            )
        )
    return reports


def run_domain_generalization(
    source_episode: Episode,
    source_manifest: dict,
    source_backend,
    targets,
    clf: TextClassifier,
    config: AblationConfig,
    mode: str = "selected_scale_weighted",
) -> list[EvalReport]:
    """Cache from the source train split, evaluated on each target set.

    `targets` is a list of (name, manifest, backend).  Target manifests must
    share the source class list, order-aligned.
    """
    source_classes = list(source_manifest["classes"])
    cache = build_cache(
        _train_features(source_backend, clf, source_episode, config),
        [label for _, label in source_episode.train],
        clf.num_classes,
    )
    spec = parse_mode(mode)
    scale_set = build_scale_set(config.n)
    reports = []
    for name, manifest, backend in targets:
        target_classes = list(manifest["classes"])
        if target_classes != source_classes:
            for i, (a, b) in enumerate(zip(source_classes, target_classes)):
                if a != b:
                    raise InvalidArgumentError(
                        f"target {name!r} class list diverges at index {i}: {a!r} != {b!r}"
                    )
            raise InvalidArgumentError(
                f"target {name!r} class list length {len(target_classes)} != {len(source_classes)}"
            )
        test = [(img["id"], int(img["label"])) for img in manifest["images"]]
        labels = [label for _, label in test]

        def per_image(item):
            image_id, _ = item
            pool = _ImagePool(
                backend, clf, image_id, backend.image_dims(image_id), config.m, config.seed
            )
            return _mode_features(pool, spec, scale_set, config.repeats)

        started = time.perf_counter()
        feats_per_image = _map_ordered(per_image, test, config.workers)
        elapsed = time.perf_counter() - started
        reps = len(feats_per_image[0])
        rep_results = []
        for r in range(reps):
            F = np.stack([f[r] for f in feats_per_image])
            clip = zero_shot_logits(F, clf)
            scores = cache_logits(F, cache, config.beta)
            pred = np.argmax(adapter_logits(clip, scores, config.alpha), axis=1)
            rep_results.append(evaluate(pred, labels))
        reports.append(
            EvalReport(
                mode=f"domain:{name}",
                params={
                    "criterion": spec.criterion,
                    "weighting": spec.weighting,
                    "n": config.n,
                    "m": config.m,
                    "shots": source_episode.shots,
                    "alpha": config.alpha,
                    "beta": config.beta,
                    "seed": config.seed,
                },
                top1=float(np.mean([r["top1"] for r in rep_results])),
                per_class=np.mean([r["per_class"] for r in rep_results], axis=0).tolist(),
                counts={"test": len(labels), "classes": clf.num_classes},
                repeats=reps,
                wall_time=elapsed,
            )
        )
    return reports


DEFAULT_BENCHMARK_MODES = (
    "global_baseline",
    "ten_crop",
    "multi_crop_avg",
    "random_per_scale_avg",
    "selected_uniform_avg",
    "selected_scale_weighted",
    "criterion:min_margin",
    "criterion:min_entropy",
    "criterion:random",
)


@dataclass
class BenchmarkConfig:
    """Planted-scene benchmark; the world defaults are calibrated so that
    margin-based refinement separates cleanly from the global baseline while
    the merge/criterion orderings stay stable across seeds."""

    classes: int = 8
    images: int = 500
    distractors: int = 3
    n: int = 5
    m: int = 20
    noise_amp: float = 0.1
    seeds: tuple[int, ...] = tuple(range(10))
    width: int = 112
    height: int = 112
    dim: int = 64
    tau: float = 0.05
    shots: int = 4
    alpha: float = 1.0
    beta: float = 5.0
    repeats: int = 10
    workers: int = 1
    object_radius: tuple[float, float] = (18.0, 26.0)
    distractor_radius: tuple[float, float] = (10.0, 36.0)
    core_distractors: int = 2
    core_radius_frac: tuple[float, float] = (0.3, 0.45)
    core_offset_frac: float = 0.3
    outer_ratio: tuple[float, float] | None = (1.05, 1.27)
    modes: tuple[str, ...] = DEFAULT_BENCHMARK_MODES

    def as_json(self) -> dict:
        return {
            "classes": self.classes,
            "images": self.images,
            "distractors": self.distractors,
            "n": self.n,
            "m": self.m,
            "noise_amp": self.noise_amp,
            "seeds": list(self.seeds),
            "width": self.width,
            "height": self.height,
            "dim": self.dim,
            "tau": self.tau,
            "shots": self.shots,
            "alpha": self.alpha,
            "beta": self.beta,
            "repeats": self.repeats,
            "object_radius": list(self.object_radius),
            "distractor_radius": list(self.distractor_radius),
            "core_distractors": self.core_distractors,
            "core_radius_frac": list(self.core_radius_frac),
            "core_offset_frac": self.core_offset_frac,
            "outer_ratio": list(self.outer_ratio) if self.outer_ratio else None,
            "modes": list(self.modes),
        }


def synthetic_benchmark(cfg: BenchmarkConfig, progress=None) -> dict:
    """Run the ablation matrix on planted scenes over several seeds.

    Returns the aggregate report: per-mode mean and stddev of top-1 over
    seeds, plus the measured wall time per image (not part of the
    deterministic payload; the report writer keeps it out of files unless
    asked).
    """
    if cfg.classes < 2:
        raise InvalidArgumentError("benchmark needs at least 2 classes")
    if cfg.dim <= cfg.classes:
        raise InvalidArgumentError("benchmark needs dim > classes for the background axis")
    per_mode: dict[str, list[float]] = {m: [] for m in cfg.modes}
    started = time.perf_counter()
    images_processed = 0
    for seed in cfg.seeds:
        scenes = generate_scenes(
            cfg.classes,
            cfg.images,
            cfg.distractors,
            cfg.width,
            cfg.height,
            seed=mix64(seed),
            object_radius=cfg.object_radius,
            distractor_radius=cfg.distractor_radius,
            core_distractors=cfg.core_distractors,
            core_radius_frac=cfg.core_radius_frac,
            core_offset_frac=cfg.core_offset_frac,
            outer_ratio=cfg.outer_ratio,
        )
        clf = make_prototype_classifier(
            cfg.classes, cfg.dim, seed=tagged_seed(seed, "prototypes"), tau=cfg.tau
        )
        backend = SyntheticBackend({s.image_id: s for s in scenes}, clf, cfg.noise_amp)
        manifest = scenes_to_dataset_manifest(scenes, clf.class_names)
        episode = build_fewshot_episode(manifest, cfg.shots, seed=seed)
        config = AblationConfig(
            n=cfg.n,
            m=cfg.m,
            seed=seed,
            alpha=cfg.alpha,
            beta=cfg.beta,
            repeats=cfg.repeats,
            workers=cfg.workers,
        )
        for report in run_ablation(episode, backend, clf, cfg.modes, config):
            per_mode[report.mode].append(report.top1)
        images_processed += len(episode.test)
        if progress is not None:
            progress(len(per_mode[cfg.modes[0]]), len(cfg.seeds))
    elapsed = time.perf_counter() - started

    mode_rows = []
    for mode in cfg.modes:
        vals = np.asarray(per_mode[mode], dtype=np.float64)
        mode_rows.append(
            {
                "mode": mode,
                "mean": float(vals.mean()),
                "std": float(vals.std(ddof=0)),
                "per_seed": [float(v) for v in vals],
            }
        )
    return {
        "config": cfg.as_json(),
        "modes": mode_rows,
        "wall_time_per_image": elapsed / max(images_processed, 1),
    }
