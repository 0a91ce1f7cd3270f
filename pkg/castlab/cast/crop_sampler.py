"""
Saliency-constrained random resized cropping.

A crop is accepted only if it covers at least ``ceil(phi * A_M)`` salient
pixels, where ``A_M`` is the salient area of the whole image. ``phi = 0``
is the ordinary random resized crop. The same geometry is applied to the
image and to its saliency mask, so the query and key crops come with
their own masks ``M_q`` and ``M_k``.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from PIL import Image

from .encoder import normalize_pixels
from .exceptions import ConfigError, CropBoundsError, DegenerateMaskError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 50


@dataclass(frozen=True, eq=False)
class SaliencyMask:
    """Binary h x w map of salient pixels."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ShapeError(f"saliency mask must be 2-D, got shape {bits.shape}")
        if bits.size and not np.isin(bits, (0, 1)).all():
            raise ValueError("saliency mask values must be 0 or 1")
        object.__setattr__(self, 'bits', bits.astype(np.uint8))

    @classmethod
    def from_bool(cls, array):
        return cls(np.asarray(array, dtype=bool).astype(np.uint8))

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def area(self):
        return int(self.bits.sum())

    def bounding_box(self):
        """Tightest (top, left, h, w) around the salient pixels, or None."""
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        if rows.size == 0:
            return None
        return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)

    def __eq__(self, other):
        return isinstance(other, SaliencyMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    crop_h: int
    crop_w: int
    hflip: bool = False

    def validate(self, height, width):
        if self.crop_h < 1 or self.crop_w < 1:
            raise CropBoundsError(f"crop extents must be >= 1, got {self.crop_h}x{self.crop_w}")
        if self.top < 0 or self.left < 0 or self.top + self.crop_h > height or self.left + self.crop_w > width:
            raise CropBoundsError(f"crop {self} does not fit inside a {height}x{width} image")
        return self

    @property
    def box(self):
        """PIL box: (left, upper, right, lower)."""
        return (self.left, self.top, self.left + self.crop_w, self.top + self.crop_h)


@dataclass(frozen=True)
class CropConstraint:
    phi: float = 0.2
    scale_range: tuple = (0.2, 1.0)
    aspect_range: tuple = (3 / 4, 4 / 3)
    max_attempts: int = DEFAULT_MAX_ATTEMPTS

    def __post_init__(self):
        if not 0.0 <= self.phi < 1.0:
            raise ConfigError('phi', f"must lie in [0, 1), got {self.phi}")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError('scale_range', f"need 0 < min <= max <= 1, got {self.scale_range}")
        lo, hi = self.aspect_range
        if not 0.0 < lo <= hi:
            raise ConfigError('aspect_range', f"need 0 < min <= max, got {self.aspect_range}")
        if self.max_attempts < 1:
            raise ConfigError('max_attempts', f"must be >= 1, got {self.max_attempts}")

    def required_overlap(self, salient_area):
        # exact rational arithmetic so that e.g. 0.2 * 15 is 3, not 3.0000000000000004
        return math.ceil(Fraction(self.phi).limit_denominator(10 ** 6) * salient_area)


class SummedAreaTable:
    """S[i][j] = sum of the mask over rows [0, i) and columns [0, j)."""

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=np.int64)
        self.height, self.width = bits.shape
        self.table = np.zeros((self.height + 1, self.width + 1), dtype=np.int64)
        self.table[1:, 1:] = bits.cumsum(axis=0).cumsum(axis=1)

    @property
    def total(self):
        return int(self.table[-1, -1])

    def rect_sum(self, top, left, h, w):
        t = self.table
        return int(t[top + h, left + w] - t[top, left + w] - t[top + h, left] + t[top, left])


def integral_image(mask):
    bits = mask.bits if isinstance(mask, SaliencyMask) else mask
    return SummedAreaTable(bits)


def overlap_area(crop, table):
    """Number of salient pixels inside the crop rectangle."""
    crop.validate(table.height, table.width)
    return table.rect_sum(crop.top, crop.left, crop.crop_h, crop.crop_w)


def draw_crop_geometry(height, width, constraint, rng):
    """One random-resized-crop draw; None when the drawn size does not fit."""
    target_area = rng.uniform(*constraint.scale_range) * height * width
    log_lo, log_hi = math.log(constraint.aspect_range[0]), math.log(constraint.aspect_range[1])
    aspect = math.exp(rng.uniform(log_lo, log_hi))
    w = int(round(math.sqrt(target_area * aspect)))
    h = int(round(math.sqrt(target_area / aspect)))
    if not (0 < w <= width and 0 < h <= height):
        return None
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return CropSpec(top, left, h, w)


def centered_fallback_crop(mask, constraint):
    """Largest square crop the scale range allows, centered on the salient bounding box.

    The crop grows to cover the whole bounding box when the scale range is
    too small for it, and is shifted back inside the image.
    """
    bbox = mask.bounding_box()
    if bbox is None:
        return CropSpec(0, 0, mask.height, mask.width)
    top, left, box_h, box_w = bbox
    side = int(round(math.sqrt(constraint.scale_range[1] * mask.height * mask.width)))
    h = min(max(side, box_h), mask.height)
    w = min(max(side, box_w), mask.width)
    top = min(max(top - (h - box_h) // 2, 0), mask.height - h)
    left = min(max(left - (w - box_w) // 2, 0), mask.width - w)
    return CropSpec(top, left, h, w)


def sample_constrained_crop(mask, constraint, rng, max_attempts=None):
    """Sample a crop covering at least ``ceil(phi * A_M)`` salient pixels.

    Draws are rejected until the constraint holds; after ``max_attempts``
    failures the maximal centered crop over the salient bounding box is
    returned (it covers all of A_M).
    """
    attempts = constraint.max_attempts if max_attempts is None else max_attempts
    salient_area = mask.area
    if constraint.phi > 0 and salient_area == 0:
        raise DegenerateMaskError("saliency mask is empty but phi > 0")
    table = integral_image(mask)
    need = constraint.required_overlap(salient_area)

    chosen = None
    for _ in range(attempts):
        crop = draw_crop_geometry(mask.height, mask.width, constraint, rng)
        if crop is None:
            continue
        if need == 0 or overlap_area(crop, table) >= need:
            chosen = crop
            break
    if chosen is None:
        chosen = centered_fallback_crop(mask, constraint)
        logger.debug("No crop met phi=%.2f in %d draws, using %s", constraint.phi, attempts, chosen)
    hflip = bool(rng.random() < 0.5)
    return CropSpec(chosen.top, chosen.left, chosen.crop_h, chosen.crop_w, hflip)


def apply_crop(array, crop, out_size):
    """Crop and resize an image [C,H,W] (bilinear) or a SaliencyMask (nearest).

    The flip of ``crop`` is applied after resizing, identically for both.
    """
    if isinstance(array, SaliencyMask):
        crop.validate(array.height, array.width)
        if crop.crop_h == out_size and crop.crop_w == out_size:
            out = array.bits[crop.top:crop.top + out_size, crop.left:crop.left + out_size].copy()
        else:
            img = Image.fromarray(array.bits * np.uint8(255))
            resized = img.resize((out_size, out_size), Image.Resampling.NEAREST, box=crop.box)
            out = (np.asarray(resized) > 127).astype(np.uint8)
        if crop.hflip:
            out = out[:, ::-1].copy()
        return SaliencyMask(out)

    image = np.asarray(array, dtype=np.float32)
    if image.ndim != 3:
        raise ShapeError(f"apply_crop expects an image [C,H,W] or a SaliencyMask, got shape {image.shape}")
    crop.validate(image.shape[1], image.shape[2])
    if crop.crop_h == out_size and crop.crop_w == out_size:
        out = image[:, crop.top:crop.top + out_size, crop.left:crop.left + out_size].copy()
    else:
        channels = []
        for channel in image:
            resized = Image.fromarray(np.ascontiguousarray(channel)).resize(
                (out_size, out_size), Image.Resampling.BILINEAR, box=crop.box)
            channels.append(np.asarray(resized, dtype=np.float32))
        out = np.stack(channels)
    if crop.hflip:
        out = out[:, :, ::-1].copy()
    return out


def restrict_to_rect(mask, crop):
    """Keep only the salient pixels that fall inside ``crop``'s rectangle."""
    crop.validate(mask.height, mask.width)
    bits = np.zeros_like(mask.bits)
    rows = slice(crop.top, crop.top + crop.crop_h)
    cols = slice(crop.left, crop.left + crop.crop_w)
    bits[rows, cols] = mask.bits[rows, cols]
    return SaliencyMask(bits)


def color_jitter(image, rng, strength):
    """Random brightness then contrast scaling, clipped to [0, 1]."""
    if strength <= 0:
        return image
    brightness = rng.uniform(1.0 - strength, 1.0 + strength)
    contrast = rng.uniform(1.0 - strength, 1.0 + strength)
    out = image * np.float32(brightness)
    gray = out.mean()
    out = (out - gray) * np.float32(contrast) + gray
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class ViewPair:
    """Query and key views of one scene; images are normalized for the encoder."""

    x_q: np.ndarray
    m_q: SaliencyMask
    x_k: np.ndarray
    m_k: SaliencyMask
    crop_q: CropSpec
    crop_k: CropSpec
    source_mask: SaliencyMask = field(repr=False)


def make_view_pair(image, mask, constraint, rng, out_size=None, jitter=0.4):
    """Two independent constrained crops of (image, mask) with color jitter on the images."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape[1:] != mask.bits.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.bits.shape} are not aligned")
    out_size = image.shape[1] if out_size is None else out_size
    views = []
    for _ in range(2):
        crop = sample_constrained_crop(mask, constraint, rng)
        x = color_jitter(apply_crop(image, crop, out_size), rng, jitter)
        views.append((normalize_pixels(x), apply_crop(mask, crop, out_size), crop))
    (x_q, m_q, crop_q), (x_k, m_k, crop_k) = views
    return ViewPair(x_q, m_q, x_k, m_k, crop_q, crop_k, source_mask=mask)


@dataclass
class CropStatistics:
    pairs: int
    co_salient_rate: float
    mean_coverage: float


def crop_statistics(masks, constraint, seed, pairs_per_mask=1):
    """How often both crops of a pair contain salient pixels, and how much of A_M they cover."""
    co_salient = 0
    coverage = []
    total = 0
    for i, mask in enumerate(masks):
        if mask.area == 0:
            continue
        table = integral_image(mask)
        for j in range(pairs_per_mask):
            rng = np.random.default_rng([seed, i, j])
            q = sample_constrained_crop(mask, constraint, rng)
            k = sample_constrained_crop(mask, constraint, rng)
            oq, ok = overlap_area(q, table), overlap_area(k, table)
            co_salient += int(oq > 0 and ok > 0)
            coverage.extend((oq / mask.area, ok / mask.area))
            total += 1
    if total == 0:
        return CropStatistics(0, 0.0, 0.0)
    return CropStatistics(total, co_salient / total, float(np.mean(coverage)))
