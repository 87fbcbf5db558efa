"""Decomposing scale sets and deterministic crop sampling.

Scales are area fractions: a crop at scale s covers a fraction s of the
image, aspect ratio preserved (w = round(W * sqrt(s)), h likewise, round
half up, clamped to [1, dimension]).  Crop positions are drawn with the
package RNG, so the full decomposition of an image is a pure function of
(image id, dimensions, n, m, global seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidArgumentError
from .rng import SplitMix64, image_seed, substream_seed

GLOBAL = "global"

TEN_CROP_LINEAR_FRACTION = 0.875  # classical corner/center protocol: 224 from 256


@dataclass(frozen=True)
class CropRect:
    """Axis-aligned crop; `hflip` marks a horizontally mirrored view."""

    x: int
    y: int
    w: int
    h: int
    hflip: bool = False

    def __post_init__(self):
        if self.w < 1 or self.h < 1 or self.x < 0 or self.y < 0:
            raise InvalidArgumentError(f"degenerate crop rectangle {self.as_json()}")

    def validate_within(self, width: int, height: int) -> None:
        if self.x + self.w > width or self.y + self.h > height:
            raise InvalidArgumentError(
                f"crop {self.as_json()} exceeds image bounds {width}x{height}"
            )

    def mirrored(self, width: int) -> "CropRect":
        """The same rectangle reflected across the image's vertical axis."""
        return CropRect(width - self.x - self.w, self.y, self.w, self.h, hflip=False)

    def key(self) -> str:
        base = f"{self.x},{self.y},{self.w},{self.h}"
        return base + ",hflip" if self.hflip else base

    def as_json(self) -> list:
        out: list = [self.x, self.y, self.w, self.h]
        if self.hflip:
            out.append("hflip")
        return out

    @staticmethod
    def from_json(value) -> "CropRect":
        if (
            not isinstance(value, (list, tuple))
            or len(value) not in (4, 5)
            or (len(value) == 5 and value[4] != "hflip")
        ):
            raise InvalidArgumentError(f"bad crop entry {value!r}")
        x, y, w, h = (int(v) for v in value[:4])
        return CropRect(x, y, w, h, hflip=len(value) == 5)


@dataclass(frozen=True)
class ScaleSet:
    """The n area fractions {gamma, 2*gamma, ..., 1.0} with gamma = 1/n."""

    n: int
    scales: tuple[float, ...]
    alpha_min: float = 0.0
    alpha_max: float = 1.0
    gamma: float = field(default=0.0)

    @property
    def local_scales(self) -> tuple[float, ...]:
        return self.scales[:-1]

    @property
    def global_scale(self) -> float:
        return self.scales[-1]


def build_scale_set(n: int) -> ScaleSet:
    """Divide (0, 1] into n scales; the last is exactly the global scale 1.0."""
    if not isinstance(n, int) or n < 1:
        raise InvalidArgumentError(f"scale count must be a positive integer, got {n!r}")
    gamma = (1.0 - 0.0) / n
    scales = tuple((i + 1) / n for i in range(n - 1)) + (1.0,)
    return ScaleSet(n=n, scales=scales, gamma=gamma)


def round_half_up(v: float) -> int:
    """Ties away from zero for positive v; Python's round() is banker's."""
    return int(math.floor(v + 0.5))


def crop_dims(width: int, height: int, scale: float) -> tuple[int, int]:
    """Aspect-preserving crop size whose area fraction approximates `scale`."""
    side = math.sqrt(scale)
    w = min(max(round_half_up(width * side), 1), width)
    h = min(max(round_half_up(height * side), 1), height)
    return w, h


def sample_crops(
    width: int, height: int, scale: float, m: int, seed: int
) -> list[CropRect]:
    """m uniformly positioned crops at one scale, deterministic in `seed`.

    Offsets are drawn x-then-y per crop from a SplitMix64 stream via
    rejection-sampled bounded integers.  scale == 1 short-circuits to m
    copies of the full-image rectangle.
    """
    if width < 2 or height < 2:
        raise InvalidArgumentError(f"image too small: {width}x{height}")
    if not (0.0 < scale <= 1.0):
        raise InvalidArgumentError(f"scale must be in (0, 1], got {scale}")
    if m < 1:
        raise InvalidArgumentError(f"crop count must be >= 1, got {m}")
    if scale == 1.0:
        return [CropRect(0, 0, width, height)] * m
    w, h = crop_dims(width, height, scale)
    rng = SplitMix64(seed)
    crops = []
    for _ in range(m):
        x = rng.bounded(width - w + 1)
        y = rng.bounded(height - h + 1)
        crops.append(CropRect(x, y, w, h))
    return crops


def area_fraction_bound(width: int, height: int) -> float:
    """Rounding tolerance on |w*h/(W*H) - scale| for sampled crops."""
    return 2.0 * max(width, height) / (width * height)


def ten_crop_rects(width: int, height: int) -> list[CropRect]:
    """Four corners + center at the classical linear fraction, plus hflips."""
    w = min(max(round_half_up(width * TEN_CROP_LINEAR_FRACTION), 1), width)
    h = min(max(round_half_up(height * TEN_CROP_LINEAR_FRACTION), 1), height)
    cx = (width - w) // 2
    cy = (height - h) // 2
    bases = [
        CropRect(0, 0, w, h),
        CropRect(width - w, 0, w, h),
        CropRect(0, height - h, w, h),
        CropRect(width - w, height - h, w, h),
        CropRect(cx, cy, w, h),
    ]
    flipped = [CropRect(c.x, c.y, c.w, c.h, hflip=True) for c in bases]
    return bases + flipped


@dataclass(frozen=True)
class ViewSet:
    """All decomposed views of one image, in scale order."""

    image_id: str
    width: int
    height: int
    per_scale: tuple[tuple[float, tuple[CropRect, ...]], ...]

    def validate(self, scale_set: ScaleSet, m: int) -> None:
        if len(self.per_scale) != scale_set.n:
            raise InvalidArgumentError("view set does not cover every scale")
        bound = area_fraction_bound(self.width, self.height)
        for i, (scale, crops) in enumerate(self.per_scale):
            if scale != scale_set.scales[i]:
                raise InvalidArgumentError("view set scales out of order")
            if scale == 1.0:
                if len(crops) != 1 or crops[0] != CropRect(0, 0, self.width, self.height):
                    raise InvalidArgumentError("global scale must hold the full image")
                continue
            if len(crops) != m:
                raise InvalidArgumentError(f"scale {scale} holds {len(crops)} != {m} crops")
            for c in crops:
                c.validate_within(self.width, self.height)
                frac = (c.w * c.h) / (self.width * self.height)
                if abs(frac - scale) > bound:
                    raise InvalidArgumentError(
                        f"crop {c.as_json()} area fraction {frac:.6f} off scale {scale}"
                    )


def build_view_set(
    image_id: str,
    width: int,
    height: int,
    scale_set: ScaleSet,
    m: int,
    global_seed: int,
) -> ViewSet:
    """Decompose one image: m crops per local scale plus the global view.

    The stream for local scale i is ``substream(image_seed, i)`` where
    ``image_seed = FNV-1a(image_id) XOR global_seed``, so results do not
    depend on evaluation order across images or scales.
    """
    seed = image_seed(global_seed, image_id)
    per_scale = []
    for i, scale in enumerate(scale_set.scales):
        if scale == 1.0:
            crops: tuple[CropRect, ...] = (CropRect(0, 0, width, height),)
        else:
            crops = tuple(sample_crops(width, height, scale, m, substream_seed(seed, i)))
        per_scale.append((scale, crops))
    return ViewSet(image_id=image_id, width=width, height=height, per_scale=tuple(per_scale))
