"""
Procedural scenes with exact saliency masks, the Backgrounds-Challenge
style variants built from them, and PPM/PGM dataset files.

Foreground classes are (shape, color) pairs, background classes are
(texture family, tint) pairs; both vocabularies have nine entries. A scene
is "biased" when its background class equals its foreground class, which
makes the background a shortcut for the foreground label.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .crop_sampler import SaliencyMask
from .exceptions import DatasetError, PoolCoverageError, SceneFormatError

logger = logging.getLogger(__name__)

SHAPES = ('circle', 'square', 'triangle')
FG_COLORS = (
    (0.90, 0.12, 0.12),
    (0.12, 0.80, 0.20),
    (0.15, 0.30, 0.95),
)
TEXTURES = ('noise', 'stripes', 'gradient')
BG_TINTS = (
    (0.58, 0.50, 0.34),
    (0.34, 0.50, 0.50),
    (0.50, 0.38, 0.52),
)
NUM_FG_CLASSES = len(SHAPES) * len(FG_COLORS)
NUM_BG_CLASSES = len(TEXTURES) * len(BG_TINTS)
MAX_OBJECTS = 3
INDEX_FILE = 'index.txt'


def fg_class_parts(fg_class):
    return SHAPES[fg_class // len(FG_COLORS)], FG_COLORS[fg_class % len(FG_COLORS)]


def bg_class_parts(bg_class):
    return TEXTURES[bg_class // len(BG_TINTS)], BG_TINTS[bg_class % len(BG_TINTS)]


def biased_bg_class(fg_class):
    """The background class paired with ``fg_class`` in biased scenes."""
    return fg_class % NUM_BG_CLASSES


@dataclass(frozen=True)
class ShapePlacement:
    cx: int
    cy: int
    size: int


@dataclass(frozen=True)
class SceneSpec:
    canvas_size: int
    fg_class: int
    bg_class: int
    objects: tuple
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"a scene holds 1 to {MAX_OBJECTS} objects, got {len(self.objects)}")
        if not 0 <= self.fg_class < NUM_FG_CLASSES or not 0 <= self.bg_class < NUM_BG_CLASSES:
            raise ValueError(f"class ids out of range: fg={self.fg_class}, bg={self.bg_class}")


@dataclass
class LabeledScene:
    image: np.ndarray  # float32 [3,H,W], multiples of 1/255
    mask: SaliencyMask
    fg_class: int
    bg_class: int
    name: str = ''
    background: np.ndarray = field(default=None, repr=False)

    @property
    def pixels(self):
        """The image as uint8 [H,W,3]."""
        return np.round(self.image.transpose(1, 2, 0) * 255.0).astype(np.uint8)


def shape_membership(shape, placement, height, width):
    """Pixels whose centers lie inside the shape."""
    py, px = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx, dy = px - placement.cx, py - placement.cy
    s = placement.size
    if shape == 'circle':
        return dx * dx + dy * dy <= s * s
    if shape == 'square':
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if shape == 'triangle':
        # apex at (cx, cy - s), base on y = cy + s, half-width s at the base
        return (dy >= -s) & (dy <= s) & (np.abs(dx) <= (dy + s) / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def scene_mask(spec):
    shape, _ = fg_class_parts(spec.fg_class)
    union = np.zeros((spec.canvas_size, spec.canvas_size), dtype=bool)
    for placement in spec.objects:
        union |= shape_membership(shape, placement, spec.canvas_size, spec.canvas_size)
    return SaliencyMask.from_bool(union)


def render_background(bg_class, size, rng):
    family, tint = bg_class_parts(bg_class)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if family == 'noise':
        coarse = rng.random((8, 8)).astype(np.float32)
        value = np.asarray(Image.fromarray(coarse).resize((size, size), Image.Resampling.BILINEAR), dtype=np.float64)
    elif family == 'stripes':
        angle = rng.uniform(0.0, np.pi)
        freq = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        value = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (x * np.cos(angle) + y * np.sin(angle)) + phase)
    else:
        angle = rng.uniform(0.0, 2 * np.pi)
        ramp = x * np.cos(angle) + y * np.sin(angle)
        value = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    shade = 0.55 + 0.45 * value
    rgb = np.stack([shade * c for c in tint])
    return quantize(rgb)


def quantize(image):
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def sample_scene_spec(rng, canvas_size=64, bias=0.0):
    fg_class = int(rng.integers(NUM_FG_CLASSES))
    if rng.random() < bias:
        bg_class = biased_bg_class(fg_class)
    else:
        bg_class = int(rng.integers(NUM_BG_CLASSES))
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    low, high = canvas_size // 10, canvas_size // 5
    objects = []
    for _ in range(count):
        size = int(rng.integers(low, high + 1))
        objects.append(ShapePlacement(
            cx=int(rng.integers(size, canvas_size - size + 1)),
            cy=int(rng.integers(size, canvas_size - size + 1)),
            size=size,
        ))
    return SceneSpec(canvas_size, fg_class, bg_class, tuple(objects), int(rng.integers(2 ** 31)))


def gen_scene(spec, name=''):
    """Render a scene deterministically from its spec."""
    rng = np.random.default_rng(spec.seed)
    background = render_background(spec.bg_class, spec.canvas_size, rng)
    mask = scene_mask(spec)
    _, color = fg_class_parts(spec.fg_class)
    foreground = quantize(np.broadcast_to(np.array(color)[:, None, None], background.shape))
    image = np.where(mask.bits[None].astype(bool), foreground, background).astype(np.float32)
    return LabeledScene(image, mask, spec.fg_class, spec.bg_class, name=name, background=background)


def gen_dataset(count, seed, canvas_size=64, bias=0.0):
    """``count`` scenes; scene i depends only on (seed, i)."""
    scenes = []
    for i in range(count):
        spec = sample_scene_spec(np.random.default_rng([seed, i]), canvas_size, bias)
        scenes.append(gen_scene(spec, name=f'scene_{i:06d}'))
    return scenes


class Variant(Enum):
    ORIGINAL = 'Original'
    MIXED_SAME = 'Mixed-Same'
    MIXED_RAND = 'Mixed-Rand'
    MIXED_NEXT = 'Mixed-Next'
    ONLY_FG = 'Only-FG'
    NO_FG = 'No-FG'
    ONLY_BG_B = 'Only-BG-B'
    ONLY_BG_T = 'Only-BG-T'


class ScenePool:
    """Scenes indexed by foreground class, the donors of swapped backgrounds."""

    def __init__(self, scenes):
        self.by_class = {}
        for scene in scenes:
            self.by_class.setdefault(scene.fg_class, []).append(scene)
        if not self.by_class:
            raise PoolCoverageError("scene pool is empty")

    def require(self, fg_class):
        donors = self.by_class.get(fg_class)
        if not donors:
            raise PoolCoverageError(f"scene pool has no scene of foreground class {fg_class}")
        return donors

    def classes(self):
        return sorted(self.by_class)


def _bbox_region(mask):
    region = np.zeros(mask.bits.shape, dtype=bool)
    bbox = mask.bounding_box()
    if bbox is not None:
        top, left, h, w = bbox
        region[top:top + h, left:left + w] = True
    return region


def tile_background(image, region):
    """Fill ``region`` with pixels copied from outside it.

    Each hole pixel takes the first non-hole pixel found at a shift of one
    region extent (right, down, left, up, diagonals); leftovers get the
    mean outside color.
    """
    out = image.copy()
    if not region.any():
        return out
    rows = np.flatnonzero(region.any(axis=1))
    cols = np.flatnonzero(region.any(axis=0))
    bh, bw = rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1
    h, w = region.shape
    todo = region.copy()
    for dy, dx in ((0, bw), (bh, 0), (0, -bw), (-bh, 0), (bh, bw), (-bh, -bw), (bh, -bw), (-bh, bw)):
        ys, xs = np.nonzero(todo)
        sy, sx = (ys + dy) % h, (xs + dx) % w
        ok = ~region[sy, sx]
        out[:, ys[ok], xs[ok]] = image[:, sy[ok], sx[ok]]
        todo[ys[ok], xs[ok]] = False
        if not todo.any():
            return out
    outside = image[:, ~region]
    fill = outside.mean(axis=1) if outside.size else np.zeros(image.shape[0], dtype=np.float32)
    out[:, todo] = fill[:, None]
    return quantize(out)


def background_only(scene):
    """The scene's background with its foreground bounding box tiled over."""
    if scene.background is not None:
        return scene.background
    return tile_background(scene.image, _bbox_region(scene.mask))


def compose_variant(scene, pool, variant, rng):
    """Build one of the eight foreground/background recombinations of ``scene``."""
    variant = Variant(variant)
    fg = scene.mask.bits.astype(bool)[None]
    if variant is Variant.ORIGINAL:
        return replace(scene, image=scene.image.copy())
    if variant is Variant.ONLY_FG:
        return replace(scene, image=np.where(fg, scene.image, 0.0).astype(np.float32))
    if variant is Variant.NO_FG:
        return replace(scene, image=np.where(fg, 0.0, scene.image).astype(np.float32))
    if variant is Variant.ONLY_BG_B:
        box = _bbox_region(scene.mask)[None]
        return replace(scene, image=np.where(box, 0.0, scene.image).astype(np.float32))
    if variant is Variant.ONLY_BG_T:
        return replace(scene, image=tile_background(scene.image, _bbox_region(scene.mask)))

    if variant is Variant.MIXED_SAME:
        donor_class = scene.fg_class
    elif variant is Variant.MIXED_NEXT:
        donor_class = (scene.fg_class + 1) % NUM_FG_CLASSES
    else:
        classes = pool.classes()
        donor_class = classes[int(rng.integers(len(classes)))]
    donors = [d for d in pool.require(donor_class) if d is not scene] or pool.require(donor_class)
    donor = donors[int(rng.integers(len(donors)))]
    image = np.where(fg, scene.image, background_only(donor)).astype(np.float32)
    return replace(scene, image=image, bg_class=donor.bg_class, background=None)


def save_scene(directory, scene):
    directory = Path(directory)
    Image.fromarray(scene.pixels).save(directory / f'{scene.name}.ppm')
    Image.fromarray(scene.mask.bits * np.uint8(255)).save(directory / f'{scene.name}.pgm')


def _open_pnm(path, mode):
    try:
        with Image.open(path) as img:
            if img.format != 'PPM' or img.mode != mode:
                raise SceneFormatError(f"{path}: expected a binary {'P6' if mode == 'RGB' else 'P5'} file")
            return np.asarray(img.copy())
    except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise SceneFormatError(f"{path}: malformed header ({exc})") from exc


def load_scene(directory, name, fg_class=-1, bg_class=-1):
    directory = Path(directory)
    pixels = _open_pnm(directory / f'{name}.ppm', 'RGB')
    bits = _open_pnm(directory / f'{name}.pgm', 'L')
    if pixels.shape[:2] != bits.shape:
        raise SceneFormatError(f"{name}: image is {pixels.shape[:2]} but mask is {bits.shape}")
    if not np.isin(bits, (0, 255)).all():
        bad = sorted(set(np.unique(bits).tolist()) - {0, 255})
        raise SceneFormatError(f"{name}.pgm: mask values must be 0 or 255, found {bad[:5]}")
    image = (pixels.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)
    return LabeledScene(image, SaliencyMask((bits > 0).astype(np.uint8)), fg_class, bg_class, name=name)


def write_dataset(directory, scenes):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for scene in scenes:
        save_scene(directory, scene)
        lines.append(f'{scene.name} {scene.fg_class} {scene.bg_class}\n')
    (directory / INDEX_FILE).write_text(''.join(lines))
    logger.info("Wrote %d scenes to %s", len(scenes), directory)


def read_index(directory):
    path = Path(directory) / INDEX_FILE
    if not path.exists():
        raise DatasetError(f"no {INDEX_FILE} in {directory}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise SceneFormatError(f"{path}:{lineno}: expected 'name fg_class bg_class'")
        try:
            entries.append((parts[0], int(parts[1]), int(parts[2])))
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: class ids must be integers") from exc
    return entries


def read_dataset(directory, limit=None):
    entries = read_index(directory)
    if limit is not None:
        entries = entries[:limit]
    return [load_scene(directory, name, fg, bg) for name, fg, bg in entries]
