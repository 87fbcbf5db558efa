"""Command-line surface.

Subcommands: scales, decompose, refine, zeroshot, fewshot, domain, ablate,
synth, validate.  Flag precedence is flags > config file (--config, JSON
with the same keys, dashes as underscores) > defaults; the effective
configuration is echoed into every report for provenance.  The seed falls
back to the VCR_SEED environment variable, then to 0, and is always echoed.
All outputs are written to a temp file and atomically renamed, so no
subcommand leaves partial output behind on error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .adapter import AdapterConfig, build_cache, adapter_logits, cache_logits, grid_search
from .embeddings import (
    FileBackend,
    canonical_json_bytes,
    load_embedding_file,
    load_text_classifier,
    make_store,
    manifest_path,
    write_bytes_atomic,
    write_embedding_file,
)
from .errors import VcrError
from .evaluation import (
    AblationConfig,
    DEFAULT_BENCHMARK_MODES,
    BenchmarkConfig,
    EvalReport,
    build_fewshot_episode,
    evaluate,
    run_ablation,
    synthetic_benchmark,
)
from .geometry import GLOBAL, build_scale_set, ten_crop_rects
from .refine import refine_image, zero_shot_logits
from .report import (
    aggregate_to_csv_rows,
    emit_report,
    report_document,
    reports_to_csv_rows,
)

CRITERION_FLAGS = {
    "max-margin": "max_margin",
    "min-margin": "min_margin",
    "min-entropy": "min_entropy",
    "random": "random",
}
WEIGHTING_FLAGS = {"scale": "scale_weighted", "uniform": "uniform", "global": "global_only"}

DEFAULTS = {
    "n": 10,
    "m": 100,
    "criterion": "max-margin",
    "weighting": "scale",
    "shots": 16,
    "alpha": 1.0,
    "beta": 5.0,
    "seed": None,  # resolved via VCR_SEED then 0
    "workers": 1,
    "format": "json",
    "plot": True,
    "repeats": 10,
}


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--n", type=int, help="number of scales (default 10)")
    p.add_argument("--m", type=int, help="views per local scale (default 100)")
    p.add_argument("--criterion", choices=sorted(CRITERION_FLAGS), help="view selection criterion (default max-margin)")
    p.add_argument("--weighting", choices=sorted(WEIGHTING_FLAGS), help="merge weighting (default scale)")
    p.add_argument("--shots", type=int, help="training shots per class (default 16)")
    p.add_argument("--alpha", type=float, help="cache mixing weight (default 1.0)")
    p.add_argument("--beta", type=float, help="cache sharpness (default 5.0)")
    p.add_argument("--grid", action="store_true", default=None, help="grid-search alpha/beta on the validation split")
    p.add_argument("--seed", type=int, help="global seed (default: VCR_SEED env var, else 0)")
    p.add_argument("--workers", type=int, help="parallel image workers; output is identical for any value (default 1)")
    p.add_argument("--embeddings", help="path to a .vcre embedding store")
    p.add_argument("--classifier", help="path to a .vcre text classifier")
    p.add_argument("--manifest", help="path to a dataset manifest JSON")
    p.add_argument("--out", help="output path")
    p.add_argument("--format", choices=["json", "csv"], help="report format for --out (default json; json also writes a .csv sibling)")
    p.add_argument("--plot", dest="plot", action="store_true", default=None, help="render figures next to the report (default)")
    p.add_argument("--no-plot", dest="plot", action="store_false", default=None, help="disable figure rendering")
    p.add_argument("--timing", action="store_true", default=None, help="embed wall-clock timing in report files (breaks byte reproducibility)")
    p.add_argument("--progress", action="store_true", default=None, help="print a plain progress counter to stderr")


def _effective(args: argparse.Namespace, keys) -> dict:
    """flags > config file > defaults; seed falls back to VCR_SEED then 0."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        with open(args.config, "rb") as f:
            file_cfg = json.load(f)
        if not isinstance(file_cfg, dict):
            raise VcrError(f"config file {args.config} must hold a JSON object")
        cfg.update(file_cfg)
    for key in (*keys, "grid", "timing", "progress"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg.get("seed") is None:
        cfg["seed"] = int(os.environ.get("VCR_SEED", "0"))
    cfg["grid"] = bool(cfg.get("grid", False))
    cfg["timing"] = bool(cfg.get("timing", False))
    cfg["progress"] = bool(cfg.get("progress", False))
    return cfg


def _load_dataset_manifest(path: str) -> dict:
    with open(path, "rb") as f:
        manifest = json.load(f)
    if "classes" not in manifest or "images" not in manifest:
        raise VcrError(f"dataset manifest {path} lacks 'classes'/'images'")
    return manifest


def _echo_config(cfg: dict, keys) -> dict:
    return {k: cfg[k] for k in keys if k in cfg}


def _stored_feature(store, image_id: str):
    """Refined row when present, else the global row."""
    if store.has_row(image_id, "refined"):
        return store.rows[store.row_index(image_id, "refined")]
    return store.lookup(image_id, GLOBAL)


# ---------------------------------------------------------------- subcommands


def _cmd_scales(args) -> int:
    cfg = _effective(args, ["n"])
    scale_set = build_scale_set(cfg["n"])
    print(" ".join(str(s) for s in scale_set.scales))
    return 0


def _cmd_decompose(args) -> int:
    cfg = _effective(args, ["n", "m", "seed", "manifest", "out"])
    if not cfg.get("manifest") or not cfg.get("out"):
        raise VcrError("decompose needs --manifest and --out")
    dataset = _load_dataset_manifest(cfg["manifest"])
    scale_sets = [build_scale_set(cfg["n"])]
    if getattr(args, "extra_n", None):
        for k in args.extra_n.split(","):
            scale_sets.append(build_scale_set(int(k)))
    include_ten_crop = not getattr(args, "no_ten_crop", False)

    from .refine import decompose_crops

    images = []
    rows = []
    row = 0
    for img in dataset["images"]:
        image_id, w, h = img["id"], int(img["width"]), int(img["height"])
        images.append({"id": image_id, "width": w, "height": h})
        seen = set()

        def emit(crop_json, key):
            nonlocal row
            if key in seen:  # repeated draws share one row
                return
            seen.add(key)
            rows.append({"image": image_id, "crop": crop_json, "row": row})
            row += 1

        emit(GLOBAL, GLOBAL)
        for variant in scale_sets:
            for _, crops in decompose_crops(image_id, w, h, variant, cfg["m"], cfg["seed"]):
                for c in crops:
                    emit(c.as_json(), c.key())
        if include_ten_crop:
            for c in ten_crop_rects(w, h):
                emit(c.as_json(), c.key())
    manifest = {
        "images": images,
        "rows": rows,
        "meta": {"n": cfg["n"], "m": cfg["m"], "seed": cfg["seed"], "ten_crop": include_ten_crop},
    }
    write_bytes_atomic(cfg["out"], canonical_json_bytes(manifest))
    print(f"wrote {cfg['out']}: {len(images)} images, {len(rows)} rows")
    return 0


def _cmd_refine(args) -> int:
    cfg = _effective(
        args, ["n", "m", "criterion", "weighting", "seed", "workers", "embeddings", "classifier", "out"]
    )
    for flag in ("embeddings", "classifier", "out"):
        if not cfg.get(flag):
            raise VcrError(f"refine needs --{flag}")
    store = load_embedding_file(cfg["embeddings"])
    clf = load_text_classifier(cfg["classifier"])
    backend = FileBackend(store)
    scale_set = build_scale_set(cfg["n"])
    criterion = CRITERION_FLAGS[cfg["criterion"]]
    weighting = WEIGHTING_FLAGS[cfg["weighting"]]

    image_ids = [img["id"] for img in store.images]

    def work(image_id):
        return refine_image(
            backend,
            clf,
            image_id,
            store.image_dims(image_id),
            scale_set,
            cfg["m"],
            criterion=criterion,
            weighting=weighting,
            seed=cfg["seed"],
        )

    from .evaluation import _map_ordered

    refined = _map_ordered(work, image_ids, cfg["workers"])
    rows = np.stack([r.vector for r in refined])
    row_meta = [
        {
            "image": image_id,
            "crop": "refined",
            "row": i,
            "selection": rf.selection.as_json() | {"weighting": rf.weighting},
        }
        for i, (image_id, rf) in enumerate(zip(image_ids, refined))
    ]
    out_store = make_store(
        store.dim,
        rows,
        store.images,
        row_meta,
        extra={"meta": {"n": cfg["n"], "m": cfg["m"], "seed": cfg["seed"], "criterion": criterion, "weighting": weighting}},
    )
    write_embedding_file(out_store, cfg["out"])
    print(f"wrote {cfg['out']}: {len(image_ids)} refined rows (dim {store.dim})")
    return 0


def _report_keys():
    return ["n", "m", "criterion", "weighting", "shots", "alpha", "beta", "seed", "workers", "format"]


def _cmd_zeroshot(args) -> int:
    cfg = _effective(args, ["embeddings", "classifier", "manifest", "out", "format", "plot", "seed"])
    for flag in ("embeddings", "classifier", "manifest", "out"):
        if not cfg.get(flag):
            raise VcrError(f"zeroshot needs --{flag}")
    store = load_embedding_file(cfg["embeddings"])
    clf = load_text_classifier(cfg["classifier"])
    dataset = _load_dataset_manifest(cfg["manifest"])
    labels = [int(img["label"]) for img in dataset["images"]]
    feats = np.stack([_stored_feature(store, img["id"]) for img in dataset["images"]])
    pred = np.argmax(zero_shot_logits(feats, clf), axis=1)
    results = evaluate(pred, labels)
    report = EvalReport(
        mode="zeroshot",
        params={"seed": cfg["seed"]},
        top1=results["top1"],
        per_class=results["per_class"],
        counts={"test": results["counts"]["test"], "classes": clf.num_classes},
        repeats=1,
    )
    doc = report_document([report], _echo_config(cfg, ["seed", "format"]), include_timing=cfg["timing"])
    written = emit_report(cfg["out"], doc, reports_to_csv_rows([report]), cfg["format"], cfg["plot"])
    print(f"top1 {results['top1']:.4f} over {results['counts']['test']} images; wrote {', '.join(written)}")
    return 0


def _cmd_fewshot(args) -> int:
    keys = ["embeddings", "classifier", "manifest", "out", "format", "plot"] + _report_keys()
    cfg = _effective(args, keys)
    for flag in ("embeddings", "classifier", "manifest", "out"):
        if not cfg.get(flag):
            raise VcrError(f"fewshot needs --{flag}")
    store = load_embedding_file(cfg["embeddings"])
    clf = load_text_classifier(cfg["classifier"])
    dataset = _load_dataset_manifest(cfg["manifest"])
    episode = build_fewshot_episode(dataset, cfg["shots"], cfg["seed"])

    train_feats = [store.lookup(image_id, GLOBAL) for image_id, _ in episode.train]
    cache = build_cache(train_feats, [l for _, l in episode.train], clf.num_classes)

    test_feats = np.stack([_stored_feature(store, image_id) for image_id, _ in episode.test])
    labels = [l for _, l in episode.test]

    alpha, beta = cfg["alpha"], cfg["beta"]
    grid_split = None
    if cfg["grid"]:
        grid_split = "val" if episode.val else "train"  # documented fallback
        val = episode.val or episode.train
        val_feats = [_stored_feature(store, image_id) for image_id, _ in val]
        adapter_cfg = AdapterConfig(alpha=alpha, beta=beta)
        alpha, beta = grid_search(
            cache,
            clf,
            val_feats,
            [l for _, l in val],
            adapter_cfg.alpha_range,
            adapter_cfg.beta_range,
            adapter_cfg.grid_steps,
        )

    epochs = getattr(args, "train_epochs", None) or 0
    if epochs:
        from .adapter import train_cache_keys

        lr = getattr(args, "lr", None) or 0.001
        cache = train_cache_keys(
            cache,
            clf,
            list(zip(train_feats, [l for _, l in episode.train])),
            AdapterConfig(alpha=alpha, beta=beta),
            lr=lr,
            epochs=epochs,
        )

    if getattr(args, "save_cache", None):
        from .adapter import write_cache_model

        write_cache_model(cache, AdapterConfig(alpha=alpha, beta=beta), args.save_cache)

    clip = zero_shot_logits(test_feats, clf)
    scores = cache_logits(test_feats, cache, beta)
    pred = np.argmax(adapter_logits(clip, scores, alpha), axis=1)
    results = evaluate(pred, labels)
    report = EvalReport(
        mode="fewshot",
        params={
            "shots": cfg["shots"],
            "alpha": alpha,
            "beta": beta,
            "grid": cfg["grid"],
            "grid_split": grid_split,
            "train_epochs": epochs,
            "seed": cfg["seed"],
        },
        top1=results["top1"],
        per_class=results["per_class"],
        counts={"test": results["counts"]["test"], "classes": clf.num_classes},
        repeats=1,
    )
    doc = report_document(
        [report], _echo_config(cfg, ["shots", "alpha", "beta", "grid", "seed"]), include_timing=cfg["timing"]
    )
    written = emit_report(cfg["out"], doc, reports_to_csv_rows([report]), cfg["format"], cfg["plot"])
    print(f"top1 {results['top1']:.4f}; wrote {', '.join(written)}")
    return 0


def _cmd_domain(args) -> int:
    keys = ["embeddings", "classifier", "manifest", "out", "format", "plot"] + _report_keys()
    cfg = _effective(args, keys)
    for flag in ("embeddings", "classifier", "manifest", "out"):
        if not cfg.get(flag):
            raise VcrError(f"domain needs --{flag}")
    if not args.target:
        raise VcrError("domain needs at least one --target EMB_PATH:MANIFEST_PATH")
    store = load_embedding_file(cfg["embeddings"])
    clf = load_text_classifier(cfg["classifier"])
    dataset = _load_dataset_manifest(cfg["manifest"])
    episode = build_fewshot_episode(dataset, cfg["shots"], cfg["seed"])
    source_classes = list(dataset["classes"])

    train_feats = [store.lookup(image_id, GLOBAL) for image_id, _ in episode.train]
    cache = build_cache(train_feats, [l for _, l in episode.train], clf.num_classes)

    reports = []
    for spec in args.target:
        if ":" not in spec:
            raise VcrError(f"--target must be EMB_PATH:MANIFEST_PATH, got {spec!r}")
        emb_path, man_path = spec.split(":", 1)
        t_store = load_embedding_file(emb_path)
        t_manifest = _load_dataset_manifest(man_path)
        t_classes = list(t_manifest["classes"])
        if t_classes != source_classes:
            for i, (a, b) in enumerate(zip(source_classes, t_classes)):
                if a != b:
                    raise VcrError(f"target {man_path} class list diverges at index {i}: {a!r} != {b!r}")
            raise VcrError(f"target {man_path} class count {len(t_classes)} != source {len(source_classes)}")
        labels = [int(img["label"]) for img in t_manifest["images"]]
        feats = np.stack([_stored_feature(t_store, img["id"]) for img in t_manifest["images"]])
        clip = zero_shot_logits(feats, clf)
        scores = cache_logits(feats, cache, cfg["beta"])
        pred = np.argmax(adapter_logits(clip, scores, cfg["alpha"]), axis=1)
        results = evaluate(pred, labels)
        reports.append(
            EvalReport(
                mode=f"domain:{os.path.basename(emb_path)}",
                params={"shots": cfg["shots"], "alpha": cfg["alpha"], "beta": cfg["beta"], "seed": cfg["seed"]},
                top1=results["top1"],
                per_class=results["per_class"],
                counts={"test": results["counts"]["test"], "classes": clf.num_classes},
                repeats=1,
            )
        )
    doc = report_document(reports, _echo_config(cfg, ["shots", "alpha", "beta", "seed"]), include_timing=cfg["timing"])
    written = emit_report(cfg["out"], doc, reports_to_csv_rows(reports), cfg["format"], cfg["plot"])
    for r in reports:
        print(f"{r.mode}: top1 {r.top1:.4f}")
    print(f"wrote {', '.join(written)}")
    return 0


def _cmd_ablate(args) -> int:
    keys = ["embeddings", "classifier", "manifest", "out", "format", "plot"] + _report_keys()
    cfg = _effective(args, keys)
    for flag in ("embeddings", "classifier", "manifest", "out"):
        if not cfg.get(flag):
            raise VcrError(f"ablate needs --{flag}")
    modes = args.modes.split(",") if args.modes else list(DEFAULT_BENCHMARK_MODES)
    store = load_embedding_file(cfg["embeddings"])
    clf = load_text_classifier(cfg["classifier"])
    dataset = _load_dataset_manifest(cfg["manifest"])
    episode = build_fewshot_episode(dataset, cfg["shots"], cfg["seed"])
    backend = FileBackend(store)
    run_cfg = AblationConfig(
        n=cfg["n"],
        m=cfg["m"],
        seed=cfg["seed"],
        alpha=cfg["alpha"],
        beta=cfg["beta"],
        repeats=cfg["repeats"],
        workers=cfg["workers"],
    )
    reports = run_ablation(episode, backend, clf, modes, run_cfg)
    doc = report_document(reports, _echo_config(cfg, _report_keys()), include_timing=cfg["timing"])
    written = emit_report(cfg["out"], doc, reports_to_csv_rows(reports), cfg["format"], cfg["plot"])
    for r in reports:
        print(f"{r.mode}: top1 {r.top1:.4f}")
    print(f"wrote {', '.join(written)}")
    return 0


def _cmd_synth(args) -> int:
    keys = ["out", "format", "plot", "seed", "workers", "alpha", "beta", "shots"]
    cfg = _effective(args, keys)
    if not cfg.get("out"):
        raise VcrError("synth needs --out")
    preset = args.preset or "default"
    if preset == "default":
        bench = BenchmarkConfig()
    elif preset == "smoke":
        bench = BenchmarkConfig(images=64, seeds=(0, 1), repeats=3)
    else:
        raise VcrError(f"unknown preset {preset!r} (default, smoke)")
    overrides = {}
    if args.images is not None:
        overrides["images"] = args.images
    if args.classes is not None:
        overrides["classes"] = args.classes
    if args.noise is not None:
        overrides["noise_amp"] = args.noise
    num_seeds = args.num_seeds if args.num_seeds is not None else len(bench.seeds)
    overrides["seeds"] = tuple(range(cfg["seed"], cfg["seed"] + num_seeds))
    if args.modes:
        overrides["modes"] = tuple(args.modes.split(","))
    if args.n is not None:
        overrides["n"] = args.n
    if args.m is not None:
        overrides["m"] = args.m
    bench = BenchmarkConfig(
        **{**bench.__dict__, **overrides, "workers": cfg["workers"], "alpha": cfg["alpha"], "beta": cfg["beta"], "shots": cfg["shots"]}
    )
    progress = (lambda done, total: print(f"seed {done}/{total} done", file=sys.stderr)) if cfg["progress"] else None
    aggregate = synthetic_benchmark(bench, progress=progress)
    wall = aggregate.pop("wall_time_per_image")
    if cfg["timing"]:
        aggregate["timing"] = {"wall_time_per_image": wall}
    write_bytes_atomic(cfg["out"], canonical_json_bytes(aggregate))
    rows = aggregate_to_csv_rows(aggregate)
    stem, _ = os.path.splitext(cfg["out"])
    from .report import write_report_csv, render_report_figures

    written = [cfg["out"]]
    if cfg["format"] == "json":
        write_report_csv(stem + ".csv", rows)
        written.append(stem + ".csv")
    if cfg["plot"]:
        written.extend(render_report_figures(stem, rows))
    print(f"wall time per image: {wall * 1000:.2f} ms", file=sys.stderr)
    for row in aggregate["modes"]:
        print(f"{row['mode']}: {row['mean']:.4f} +- {row['std']:.4f}")
    print(f"wrote {', '.join(written)}")
    return 0


def _cmd_validate(args) -> int:
    path = args.path
    if path.endswith(".json"):
        with open(path, "rb") as f:
            manifest = json.load(f)
        if "rows" in manifest and "images" in manifest:
            ids = {img["id"] for img in manifest["images"]}
            seen = set()
            for entry in manifest["rows"]:
                if entry["image"] not in ids:
                    raise VcrError(f"row references unknown image {entry['image']!r}")
                key = (entry["image"], json.dumps(entry["crop"]))
                if key in seen:
                    raise VcrError(f"duplicate (image, crop) row {key}")
                seen.add(key)
            print(f"ok: crop manifest with {len(ids)} images, {len(manifest['rows'])} rows")
            return 0
        raise VcrError(f"{path} is not a recognized manifest")
    sidecar = manifest_path(path)
    with open(sidecar, "rb") as f:
        manifest = json.load(f)
    if "labels" in manifest:
        from .adapter import load_cache_model

        cache, config = load_cache_model(path)
        print(f"ok: cache with {cache.size} keys, dim {cache.dim}, {cache.class_count} classes, "
              f"alpha {config.alpha}, beta {config.beta}")
        return 0
    if "classes" in manifest:
        clf = load_text_classifier(path)
        print(f"ok: classifier with {clf.num_classes} classes, dim {clf.dim}, tau {clf.tau}")
        return 0
    store = load_embedding_file(path)
    print(f"ok: store with {store.count} rows, dim {store.dim}, {len(store.images)} images")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcr",
        description="Multi-scale content refinement over embedding backends: decompose, select by margin, merge, adapt, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scales", help="print the decomposing scale set for --n")
    _common_flags(p)
    p.set_defaults(func=_cmd_scales)

    p = sub.add_parser("decompose", help="emit the crop manifest for a dataset manifest")
    _common_flags(p)
    p.add_argument("--no-ten-crop", action="store_true", help="omit corner/center flip rows")
    p.add_argument("--extra-n", help="comma-separated extra scale counts to decompose as well (for n-variant ablations)")
    p.set_defaults(func=_cmd_decompose)

    p = sub.add_parser("refine", help="refine an embedding store into per-image features")
    _common_flags(p)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("zeroshot", help="classify stored features against a classifier")
    _common_flags(p)
    p.set_defaults(func=_cmd_zeroshot)

    p = sub.add_parser("fewshot", help="few-shot episode with the cache adapter")
    _common_flags(p)
    p.add_argument("--save-cache", help="also persist the cache model as a .vcre store")
    p.add_argument("--train-epochs", type=int, help="fine-tune cache keys by gradient descent for this many epochs")
    p.add_argument("--lr", type=float, help="learning rate for --train-epochs (default 0.001)")
    p.set_defaults(func=_cmd_fewshot)

    p = sub.add_parser("domain", help="cache from source, evaluate on shifted targets")
    _common_flags(p)
    p.add_argument("--target", action="append", default=[], help="EMB_PATH:MANIFEST_PATH (repeatable)")
    p.set_defaults(func=_cmd_domain)

    p = sub.add_parser("ablate", help="run the ablation mode matrix on a store")
    _common_flags(p)
    p.add_argument("--modes", help="comma-separated mode list (see docs; default full matrix)")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("synth", help="run the planted-scene benchmark")
    _common_flags(p)
    p.add_argument("--preset", choices=["default", "smoke"], help="benchmark preset (default: default)")
    p.add_argument("--images", type=int, help="images per seed")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--noise", type=float, help="noise amplitude")
    p.add_argument("--num-seeds", type=int, help="how many consecutive seeds to run")
    p.add_argument("--modes", help="comma-separated mode list override")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("validate", help="check a .vcre store/classifier or a crop manifest")
    p.add_argument("path")
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VcrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
