"""
Grad-CAM overlays written as PPM/PGM files.
"""
import logging
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

from . import autodiff as ad
from .cast_loss import grad_cam, mask_key
from .crop_sampler import make_view_pair
from .encoder import denormalize_pixels, forward_batch
from .exceptions import DatasetError

logger = logging.getLogger(__name__)

COLORMAP = 'jet'
SUFFIXES = ('query.ppm', 'key.ppm', 'masked_key.ppm', 'gradcam.ppm', 'saliency.pgm')


def to_bytes(image):
    """[3,H,W] floats in [0, 1] to an HxWx3 uint8 array."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def upsample_cam(grid, size):
    """Max-normalize a Grad-CAM grid and resize it bilinearly to ``size``."""
    grid = np.asarray(grid, dtype=np.float32)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    resized = Image.fromarray(grid).resize((size, size), Image.Resampling.BILINEAR)
    return np.clip(np.asarray(resized, dtype=np.float32), 0.0, 1.0)


def overlay(image, heat):
    """round(0.5 * image * 255 + 0.5 * jet(heat) * 255) per channel, HxWx3 uint8."""
    rgb = matplotlib.colormaps[COLORMAP](heat)[..., :3]
    base = np.clip(image, 0.0, 1.0).transpose(1, 2, 0)
    return np.round(0.5 * base * 255.0 + 0.5 * rgb * 255.0).astype(np.uint8)


def masked_key_pixels(x_k, m_k):
    """The masked key the key encoder sees, back in [0, 1]; non-salient pixels are mid-grey."""
    return denormalize_pixels(mask_key(x_k, m_k))


def sample_paths(out_dir, index):
    stem = f'sample_{index:04d}'
    return [Path(out_dir) / f'{stem}_{suffix}' for suffix in SUFFIXES]


def visualize_scenes(params, key_params, scenes, constraint, seed, out_dir, jitter=0.4):
    """Write query, key, masked key, overlay and saliency files for each scene.

    Scenes with an empty mask are skipped; returns the written paths.
    """
    if not scenes:
        raise DatasetError("nothing to visualize")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, scene in enumerate(scenes):
        if scene.mask.area == 0:
            logger.info("Skipping %s: empty saliency mask", scene.name or i)
            continue
        view = make_view_pair(scene.image, scene.mask, constraint, np.random.default_rng([seed, i]), jitter=jitter)
        x_km = mask_key(view.x_k, view.m_k)
        out_q = forward_batch(params, view.x_q[None])
        with ad.no_grad():
            k_m = forward_batch(key_params, x_km[None]).embedding.data
        cam = grad_cam(out_q.embedding, k_m, out_q.conv5_acts, build_graph=False).grid.data[0]

        query = denormalize_pixels(view.x_q)
        key = denormalize_pixels(view.x_k)
        masked = masked_key_pixels(view.x_k, view.m_k)
        heat = upsample_cam(cam, query.shape[-1])
        paths = sample_paths(out_dir, i)
        Image.fromarray(to_bytes(query)).save(paths[0])
        Image.fromarray(to_bytes(key)).save(paths[1])
        Image.fromarray(to_bytes(masked)).save(paths[2])
        Image.fromarray(overlay(query, heat)).save(paths[3])
        Image.fromarray(view.m_q.bits * np.uint8(255)).save(paths[4])
        written.extend(paths)
    logger.info("Wrote %d visualization files to %s", len(written), out_dir)
    return written
