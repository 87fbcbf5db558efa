"""Encoder backends.

Two families are registered:

* ``toy-patch-v1`` (default): a deterministic, dependency-free dual encoder.
  Image side: foreground color / shape statistics plus a fixed random
  projection of a gray downsample.  Text side: color and shape words are
  mapped onto the same handcrafted feature slots, so prompts like
  "a photo of a red circle" genuinely align with red-circle pixels.  It is
  untrained, offline, and byte-deterministic, which is what the test
  harness needs.

* ``clip:<model-id>``: a real pretrained dual encoder loaded through
  transformers (e.g. ``clip:openai/clip-vit-base-patch32``).  Requires the
  weights to be downloadable or cached; we abort with a clear message
  otherwise.
"""

from __future__ import annotations

import re

import numpy as np
from PIL import Image

_COLOR_ANCHORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 0.9, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 0.9, 1.0),
    "orange": (1.0, 0.55, 0.0),
    "purple": (0.6, 0.0, 0.9),
}

# bbox fill ratio, center occupancy, second-moment spread (x, y)
_SHAPE_ANCHORS = {
    "circle": (0.78, 1.0, 0.25, 0.25),
    "square": (1.0, 1.0, 0.29, 0.29),
    "triangle": (0.5, 0.75, 0.24, 0.22),
    "cross": (0.42, 1.0, 0.30, 0.30),
    "ring": (0.48, 0.0, 0.32, 0.32),
    "diamond": (0.5, 1.0, 0.20, 0.20),
}

_HAND_WEIGHT = 2.0  # handcrafted block vs texture projection block


def _projection_matrix(dim_out: int, dim_in: int) -> np.ndarray:
    rng = np.random.default_rng(0xC11F)  # fixed: the "weights" of the toy model
    proj = rng.standard_normal((dim_out, dim_in))
    return (proj / np.linalg.norm(proj, axis=1, keepdims=True)).astype(np.float64)


class ToyPatchModel:
    """Deterministic offline dual encoder over 64x64 bicubic inputs."""

    name = "toy-patch-v1"
    input_resolution = 64
    interpolation = "bicubic"
    tau = 0.05  # the model's fixed temperature constant
    _texture_dims = 10

    def __init__(self):
        self.dim = 10 + self._texture_dims
        self._proj = _projection_matrix(self._texture_dims, 64)

    # ---------------------------------------------------------------- image

    def encode_image(self, image: Image.Image) -> np.ndarray:
        """Unit-norm embedding of one preprocessed (already resized) image."""
        arr = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
        sat = arr.max(axis=2) - arr.min(axis=2)
        mask = sat > 0.15

        if mask.any():
            fg_rgb = arr[mask].mean(axis=0)
            ys, xs = np.nonzero(mask)
            x0, x1 = xs.min(), xs.max() + 1
            y0, y1 = ys.min(), ys.max() + 1
            bbox_area = (x1 - x0) * (y1 - y0)
            fill = mask.sum() / bbox_area
            fg_frac = mask.mean()
            # occupancy of the central ninth of the bounding box (rings are hollow)
            cx0, cx1 = x0 + (x1 - x0) // 3, x1 - (x1 - x0) // 3
            cy0, cy1 = y0 + (y1 - y0) // 3, y1 - (y1 - y0) // 3
            center = mask[cy0:max(cy1, cy0 + 1), cx0:max(cx1, cx0 + 1)]
            center_occ = center.mean() if center.size else 0.0
            sx = xs.std() / max(x1 - x0, 1)
            sy = ys.std() / max(y1 - y0, 1)
        else:
            fg_rgb = np.zeros(3)
            fill = fg_frac = center_occ = sx = sy = 0.0

        gray = np.asarray(
            image.convert("L").resize((8, 8), Image.Resampling.BICUBIC), dtype=np.float64
        ).reshape(-1) / 255.0
        texture = self._proj @ (gray - gray.mean())

        hand = np.array([*fg_rgb, fill, center_occ, sx, sy, fg_frac, 0.0, 0.0])
        vec = np.concatenate([_HAND_WEIGHT * hand, texture])
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            vec = np.zeros(self.dim)
            vec[-1] = 1.0
            return vec.astype(np.float32)
        return (vec / norm).astype(np.float32)

    # ----------------------------------------------------------------- text

    def encode_text(self, prompt: str) -> np.ndarray:
        """Unit-norm embedding of one prompt string."""
        words = re.findall(r"[a-z]+", prompt.lower())
        color = next((w for w in words if w in _COLOR_ANCHORS), None)
        shape = next((w for w in words if w in _SHAPE_ANCHORS), None)
        hand = np.zeros(10)
        if color is not None:
            hand[0:3] = _COLOR_ANCHORS[color]
        if shape is not None:
            fill, center_occ, sx, sy = _SHAPE_ANCHORS[shape]
            hand[3:7] = (fill, center_occ, sx, sy)
        if color is None and shape is None:
            # unknown vocabulary: a stable hashed direction, so distinct
            # class names stay distinct
            h = abs(hash_words(words)) % (2**32)
            rng = np.random.default_rng(h)
            hand = rng.standard_normal(10)
        vec = np.concatenate([_HAND_WEIGHT * hand, np.zeros(self._texture_dims)])
        return (vec / np.linalg.norm(vec)).astype(np.float32)


def hash_words(words) -> int:
    h = 0xCBF29CE484222325
    for w in words:
        for b in w.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & ((1 << 64) - 1)
    return h


class HFClipModel:
    """transformers-backed CLIP; import and download guarded."""

    interpolation = "bicubic"

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise RuntimeError(
                f"backend clip:{model_id} needs the 'clip' extra (torch + transformers): {exc}"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id)
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:  # pragma: no cover - environment dependent
            raise RuntimeError(
                f"could not load pretrained weights for {model_id!r} "
                f"(offline environment?): {exc}"
            ) from exc
        self._torch = torch
        self._model.eval()
        self.name = model_id
        self.dim = int(self._model.config.projection_dim)
        self.input_resolution = int(self._model.config.vision_config.image_size)
        self.tau = float(1.0 / self._model.logit_scale.exp().item())

    def encode_image(self, image: Image.Image) -> np.ndarray:  # pragma: no cover
        inputs = self._processor(images=image, return_tensors="pt")
        with self._torch.no_grad():
            feats = self._model.get_image_features(**inputs)[0]
        vec = feats.double().numpy()
        return (vec / np.linalg.norm(vec)).astype(np.float32)

    def encode_text(self, prompt: str) -> np.ndarray:  # pragma: no cover
        inputs = self._processor(text=[prompt], return_tensors="pt", padding=True)
        with self._torch.no_grad():
            feats = self._model.get_text_features(**inputs)[0]
        vec = feats.double().numpy()
        return (vec / np.linalg.norm(vec)).astype(np.float32)


DEFAULT_MODEL = "toy-patch-v1"


def load_model(spec: str):
    if spec in ("toy", "toy-patch-v1", DEFAULT_MODEL):
        return ToyPatchModel()
    if spec.startswith("clip:"):
        return HFClipModel(spec.split(":", 1)[1])
    raise ValueError(f"unknown model spec {spec!r} (use 'toy-patch-v1' or 'clip:<model-id>')")
