"""Crop-manifest driven export of image and text embeddings."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .vcre import read_store, write_store

DEFAULT_TEMPLATES = [
    "itap of a {}.",
    "a bad photo of the {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
]


@dataclass
class ExportJob:
    model: object
    root: str = "."
    batch_size: int = 32
    device: str = "cpu"
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))


def _prepare_crop(image: Image.Image, crop, resolution: int) -> Image.Image:
    """Crop (honoring the hflip marker), then resize to the model input."""
    if crop == "global":
        region = image
    else:
        x, y, w, h = (int(v) for v in crop[:4])
        hflip = len(crop) == 5 and crop[4] == "hflip"
        source = image.transpose(Image.Transpose.FLIP_LEFT_RIGHT) if hflip else image
        if x < 0 or y < 0 or x + w > image.width or y + h > image.height:
            raise ValueError(f"crop {crop} exceeds image bounds {image.width}x{image.height}")
        region = source.crop((x, y, x + w, y + h))
    return region.resize((resolution, resolution), Image.Resampling.BICUBIC)


def export_image_embeddings(job: ExportJob, crop_manifest: dict, out_path: str,
                            classifier_path: str | None = None) -> dict:
    """Encode every manifest row, in manifest order, and write the store.

    Rows are processed in batches of `job.batch_size`; the batch split can
    never change the output because each crop is encoded independently.
    """
    model = job.model
    if classifier_path is not None:
        rows, _ = read_store(classifier_path)
        if rows.shape[1] != model.dim:
            raise ValueError(
                f"classifier {classifier_path} has dim {rows.shape[1]}, model produces {model.dim}"
            )
    entries = sorted(crop_manifest["rows"], key=lambda e: e["row"])
    if [e["row"] for e in entries] != list(range(len(entries))):
        raise ValueError("crop manifest row indices are not dense")

    images: dict[str, Image.Image] = {}

    def load(image_id: str) -> Image.Image:
        if image_id not in images:
            path = os.path.join(job.root, image_id)
            try:
                images[image_id] = Image.open(path).convert("RGB")
            except OSError as exc:
                raise ValueError(f"unreadable image {path}: {exc}") from exc
        return images[image_id]

    out = np.zeros((len(entries), model.dim), dtype=np.float32)
    for start in range(0, len(entries), job.batch_size):
        batch = entries[start : start + job.batch_size]
        for entry in batch:
            prepared = _prepare_crop(load(entry["image"]), entry["crop"], model.input_resolution)
            out[entry["row"]] = model.encode_image(prepared)
        images.clear()  # keep memory flat across batches

    manifest = {
        "images": crop_manifest["images"],
        "rows": crop_manifest["rows"],
        "export": {
            "model": model.name,
            "dim": model.dim,
            "input_resolution": model.input_resolution,
            "interpolation": model.interpolation,
        },
    }
    write_store(out_path, out, manifest)
    return manifest


def export_text_classifier(job: ExportJob, class_names: list[str], out_path: str) -> dict:
    """Average unit template embeddings per class, re-normalize, store."""
    if not class_names:
        raise ValueError("class list is empty")
    if not job.templates:
        raise ValueError("template list is empty")
    model = job.model
    rows = np.zeros((len(class_names), model.dim), dtype=np.float32)
    for i, name in enumerate(class_names):
        per_template = np.stack(
            [model.encode_text(t.format(name.replace("_", " "))) for t in job.templates]
        ).astype(np.float64)
        mean = per_template.mean(axis=0)
        rows[i] = (mean / np.linalg.norm(mean)).astype(np.float32)
    manifest = {
        "classes": list(class_names),
        "tau": model.tau,
        "export": {
            "model": model.name,
            "templates": list(job.templates),
        },
    }
    write_store(out_path, rows, manifest)
    return manifest


def in_process_zero_shot(store_path: str, classifier_path: str) -> dict:
    """The exporter's own zero-shot predictions on its exported global rows.

    Used by the round-trip contract test: the downstream tool must agree
    class-for-class on the same files.
    """
    rows, manifest = read_store(store_path)
    clf_rows, clf_manifest = read_store(classifier_path)
    tau = float(clf_manifest["tau"])
    predictions = {}
    logits_out = {}
    for entry in manifest["rows"]:
        if entry["crop"] != "global":
            continue
        feat = rows[entry["row"]].astype(np.float64)
        logits = feat @ clf_rows.astype(np.float64).T / tau
        predictions[entry["image"]] = int(np.argmax(logits))
        logits_out[entry["image"]] = logits.tolist()
    return {"predictions": predictions, "logits": logits_out}
