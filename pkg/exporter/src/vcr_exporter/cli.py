"""vcr-export: encode images and prompt ensembles into .vcre stores."""

from __future__ import annotations

import argparse
import json
import sys

from .export import DEFAULT_TEMPLATES, ExportJob, export_image_embeddings, export_text_classifier
from .models import DEFAULT_MODEL, load_model


def _cmd_images(args) -> int:
    with open(args.manifest) as f:
        crop_manifest = json.load(f)
    if "rows" not in crop_manifest or "images" not in crop_manifest:
        print(f"error: {args.manifest} is not a crop manifest", file=sys.stderr)
        return 1
    job = ExportJob(model=load_model(args.model), root=args.root, batch_size=args.batch)
    export_image_embeddings(job, crop_manifest, args.out, classifier_path=args.classifier)
    print(f"wrote {args.out}: {len(crop_manifest['rows'])} rows (model {job.model.name})")
    return 0


def _cmd_text(args) -> int:
    if args.classes:
        class_names = [c.strip() for c in args.classes.split(",") if c.strip()]
    elif args.manifest:
        with open(args.manifest) as f:
            class_names = json.load(f)["classes"]
    else:
        print("error: text export needs --classes or --manifest", file=sys.stderr)
        return 1
    templates = args.template if args.template else list(DEFAULT_TEMPLATES)
    job = ExportJob(model=load_model(args.model), templates=templates)
    export_text_classifier(job, class_names, args.out)
    print(f"wrote {args.out}: {len(class_names)} classes, {len(templates)} templates")
    return 0


def _cmd_demo_data(args) -> int:
    from .shapes import generate_dataset

    manifest = generate_dataset(
        args.root,
        per_class=args.per_class,
        colors=args.colors,
        shapes=args.shapes,
        image_size=args.image_size,
        seed=args.seed,
    )
    print(f"wrote {len(manifest['images'])} images over {len(manifest['classes'])} classes under {args.root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcr-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("images", help="encode image crops per a crop manifest")
    p.add_argument("--model", default=DEFAULT_MODEL, help="toy-patch-v1 or clip:<model-id>")
    p.add_argument("--manifest", required=True, help="crop manifest JSON (from the decompose tool)")
    p.add_argument("--root", default=".", help="image root directory (ids are relative paths)")
    p.add_argument("--out", required=True, help="output .vcre path")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--classifier", help="existing classifier .vcre to check dimensions against")
    p.set_defaults(func=_cmd_images)

    p = sub.add_parser("text", help="encode a prompt-ensemble text classifier")
    p.add_argument("--model", default=DEFAULT_MODEL)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--manifest", help="dataset manifest JSON providing the class list")
    p.add_argument("--out", required=True)
    p.add_argument("--template", action="append", help="prompt template with {} placeholder (repeatable)")
    p.set_defaults(func=_cmd_text)

    p = sub.add_parser("demo-data", help="render the labeled shape dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--per-class", type=int, default=18)
    p.add_argument("--colors", type=int, default=4)
    p.add_argument("--shapes", type=int, default=3)
    p.add_argument("--image-size", type=int, default=160)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_demo_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
