"""Deterministic labeled shape-image generator for demos and smoke tests.

Classes are color/shape pairs ("red circle", "blue square", ...).  Each
image holds one large labeled shape on a noisy gray background; about half
also get a smaller off-class distractor shape, so global views are
sometimes misled while zoomed views are not.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image, ImageDraw

COLORS = {
    "red": (220, 30, 30),
    "green": (20, 190, 40),
    "blue": (30, 60, 220),
    "yellow": (235, 210, 20),
    "magenta": (220, 30, 220),
    "cyan": (20, 200, 230),
    "orange": (240, 140, 10),
    "purple": (150, 20, 220),
}
SHAPES = ["circle", "square", "triangle", "cross", "ring", "diamond"]


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx, cy, r, color, bg):
    x0, y0, x1, y1 = cx - r, cy - r, cx + r, cy + r
    if shape == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif shape == "square":
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=color)
    elif shape == "cross":
        t = max(2, int(r * 0.45))
        draw.rectangle([cx - t, y0, cx + t, y1], fill=color)
        draw.rectangle([x0, cy - t, x1, cy + t], fill=color)
    elif shape == "ring":
        draw.ellipse([x0, y0, x1, y1], fill=color)
        ri = int(r * 0.55)
        draw.ellipse([cx - ri, cy - ri, cx + ri, cy + ri], fill=bg)
    elif shape == "diamond":
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=color)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def generate_dataset(
    root: str,
    per_class: int = 18,
    colors: int = 4,
    shapes: int = 3,
    image_size: int = 160,
    seed: int = 0,
    distractor_prob: float = 0.5,
) -> dict:
    """Render the dataset under `root`; returns the dataset manifest."""
    color_names = list(COLORS)[:colors]
    shape_names = SHAPES[:shapes]
    classes = [f"{c} {s}" for c in color_names for s in shape_names]
    rng = np.random.default_rng(seed)
    images = []
    for label, cls in enumerate(classes):
        color_name, shape_name = cls.split(" ")
        cls_dir = cls.replace(" ", "_")
        os.makedirs(os.path.join(root, cls_dir), exist_ok=True)
        for k in range(per_class):
            gray = int(rng.integers(200, 240))
            bg = (gray, gray, gray)
            img = Image.new("RGB", (image_size, image_size), bg)
            draw = ImageDraw.Draw(img)
            # unsaturated background blobs for texture
            for _ in range(int(rng.integers(2, 6))):
                g = int(rng.integers(170, 250))
                bx, by = rng.integers(0, image_size, 2)
                br = int(rng.integers(6, 20))
                draw.ellipse([bx - br, by - br, bx + br, by + br], fill=(g, g, g))
            if rng.random() < distractor_prob:
                other = classes[int(rng.integers(0, len(classes)))]
                oc, os_ = other.split(" ")
                r = int(rng.integers(image_size // 14, image_size // 8))
                cx = int(rng.integers(r, image_size - r))
                cy = int(rng.integers(r, image_size - r))
                _draw_shape(draw, os_, cx, cy, r, COLORS[oc], bg)
            r = int(rng.integers(image_size // 6, image_size // 4))
            cx = int(rng.integers(r, image_size - r))
            cy = int(rng.integers(r, image_size - r))
            _draw_shape(draw, shape_name, cx, cy, r, COLORS[color_name], bg)
            rel = os.path.join(cls_dir, f"img{k:03d}.png")
            img.save(os.path.join(root, rel))
            images.append({"id": rel, "label": label, "width": image_size, "height": image_size})
    manifest = {"classes": classes, "images": images}
    with open(os.path.join(root, "dataset.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest
