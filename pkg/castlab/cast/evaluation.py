"""
Grounding and background-robustness evaluation.

Grounding compares the binarized Grad-CAM map of the query/masked-key
match with the binarized saliency target on the conv grid. The
backgrounds table classifies the eight recombinations of held-out scenes
with a linear probe on frozen embeddings.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cast_loss import attention_target, build_views, grad_cam, grad_cam_from_score, mask_key, supervision_mask
from .data import NUM_FG_CLASSES, Variant, compose_variant
from .encoder import embed_images, forward_batch, normalize_pixels
from .exceptions import DatasetError, ShapeError

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 20
FOREGROUND_VARIANTS = (Variant.ORIGINAL, Variant.MIXED_SAME, Variant.MIXED_RAND, Variant.MIXED_NEXT, Variant.ONLY_FG)
BACKGROUND_VARIANTS = (Variant.NO_FG, Variant.ONLY_BG_B, Variant.ONLY_BG_T)


def binarize(values):
    """Normalize by the max and threshold at 0.5; an all-zero map stays zero."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    if peak <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return (values / peak >= 0.5).astype(np.uint8)


def iou(a, b):
    """|a and b| / |a or b|; two empty grids score 0."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"iou needs equal shapes, got {a.shape} and {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class GroundingReport:
    ious: list
    flags: list = field(default_factory=list)
    both_empty: int = 0
    skipped: int = 0
    label: str = ''

    @property
    def mean_iou(self):
        return float(np.mean(self.ious)) if self.ious else 0.0

    @property
    def histogram(self):
        counts, edges = np.histogram(self.ious, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
        return counts, edges

    def summary(self):
        return (
            f"grounding {self.label or 'report'}: samples={len(self.ious)} mean_iou={self.mean_iou:.4f} "
            f"both_empty={self.both_empty} skipped={self.skipped}"
        )

    def write(self, prefix):
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        with open(prefix.with_name(prefix.name + '.csv'), 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(['sample', 'iou', 'flag_both_empty'])
            for i, (value, flag) in enumerate(zip(self.ious, self.flags)):
                writer.writerow([i, f'{value:.6f}', int(flag)])
        counts, edges = self.histogram
        with open(prefix.with_name(prefix.name + '_hist.csv'), 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(['bin_lo', 'bin_hi', 'count'])
            for lo, hi, count in zip(edges[:-1], edges[1:], counts):
                writer.writerow([f'{lo:.2f}', f'{hi:.2f}', int(count)])
        prefix.with_name(prefix.name + '_summary.txt').write_text(self.summary() + '\n')


def grounding_report(cams, targets, label=''):
    """Score Grad-CAM grids against saliency targets."""
    report = GroundingReport(ious=[], label=label)
    for cam, target in zip(cams, targets):
        a, b = binarize(cam), binarize(target)
        empty = not a.any() and not b.any()
        if empty:
            report.both_empty += 1
            logger.debug("Both Grad-CAM and target are empty for sample %d", len(report.ious))
        report.ious.append(iou(a, b))
        report.flags.append(empty)
    return report


def _model_cams(pair, views):
    x_q = np.stack([v.x_q for v in views])
    x_km = mask_key(np.stack([v.x_k for v in views]), [v.m_k for v in views])
    out_q = forward_batch(pair.query, x_q)
    with ad.no_grad():
        masked_keys = forward_batch(pair.key, x_km).embedding.data
    cam = grad_cam(out_q.embedding, masked_keys, out_q.conv5_acts, build_graph=False)
    return cam.grid.data


def grounding_eval(pair, scenes, constraint, seed, supervision_mode='full', jitter=0.4, batch_size=32,
                   cam_fn=None, label=''):
    """Grad-CAM/saliency IoU over view pairs built as in training.

    Sample i draws its views from ``default_rng([seed, i])``, so the report
    is a pure function of (checkpoint, scenes, seed). ``cam_fn(views)`` can
    replace the model's Grad-CAM, e.g. with an oracle.
    """
    if not scenes:
        raise DatasetError("grounding evaluation needs at least one scene")
    cams, targets, skipped = [], [], 0
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        seeds = [[seed, start + i] for i in range(len(chunk))]
        views, dropped = build_views([(s.image, s.mask) for s in chunk], constraint, seeds, jitter)
        skipped += dropped
        if not views:
            continue
        grid = cams_from(cam_fn, pair, views)
        size = views[0].x_q.shape[-1]
        cams.extend(grid)
        targets.extend(attention_target(supervision_mask(v, supervision_mode, size), grid.shape[-1]) for v in views)
    report = grounding_report(cams, targets, label=label)
    report.skipped = skipped
    logger.info(report.summary())
    return report


def cams_from(cam_fn, pair, views):
    if cam_fn is not None:
        return np.asarray(cam_fn(views), dtype=np.float32)
    return _model_cams(pair, views)


def probe_grounding(params, probe, scenes, batch_size=32, label='probe'):
    """Grad-CAM of the probe logit for the true class against the full-image saliency."""
    if not scenes:
        raise DatasetError("probe grounding needs at least one scene")
    weight = ad.Tensor(probe.weight)
    bias = ad.Tensor(probe.bias)
    cams, targets = [], []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        out = forward_batch(params, np.stack([normalize_pixels(s.image) for s in chunk]))
        logits = out.embedding @ ad.transpose(weight) + bias
        onehot = np.eye(probe.weight.shape[0], dtype=np.float32)[[s.fg_class for s in chunk]]
        score = ad.sum_(logits * ad.Tensor(onehot))
        grid = grad_cam_from_score(score, out.conv5_acts, build_graph=False).grid.data
        cams.extend(grid)
        targets.extend(attention_target(s.mask, grid.shape[-1]) for s in chunk)
    report = grounding_report(cams, targets, label=label)
    logger.info(report.summary())
    return report


@dataclass
class BackgroundsTable:
    accuracy: dict
    counts: dict
    label: str = ''

    def row(self):
        return [self.label] + [f'{self.accuracy[v.value]:.4f}' for v in Variant] + [self.counts[Variant.ORIGINAL.value]]

    @staticmethod
    def header():
        return ['model'] + [v.value for v in Variant] + ['count']

    def foreground_gain_over(self, other):
        return {v.value: self.accuracy[v.value] - other.accuracy[v.value] for v in FOREGROUND_VARIANTS}

    def background_gain_over(self, other):
        return {v.value: self.accuracy[v.value] - other.accuracy[v.value] for v in BACKGROUND_VARIANTS}


def classify_scenes(params, probe, scenes):
    images = np.stack([normalize_pixels(s.image) for s in scenes])
    return probe.predict(embed_images(params, images))


def backgrounds_eval(params, probe, scenes, pool, seed, label=''):
    """Probe accuracy on every variant of every scene in ``scenes``."""
    if not scenes:
        raise DatasetError("backgrounds evaluation needs at least one scene")
    for scene in scenes:
        pool.require(scene.fg_class)
        pool.require((scene.fg_class + 1) % NUM_FG_CLASSES)
    labels = np.array([s.fg_class for s in scenes])
    accuracy, counts = {}, {}
    for index, variant in enumerate(Variant):
        composed = [
            compose_variant(scene, pool, variant, np.random.default_rng([seed, i, index]))
            for i, scene in enumerate(scenes)
        ]
        predictions = classify_scenes(params, probe, composed)
        accuracy[variant.value] = float(np.mean(predictions == labels))
        counts[variant.value] = len(composed)
    table = BackgroundsTable(accuracy, counts, label=label)
    original = accuracy[Variant.ORIGINAL.value]
    for variant in (Variant.MIXED_SAME, Variant.MIXED_RAND, Variant.MIXED_NEXT):
        if accuracy[variant.value] > original:
            logger.warning("%s accuracy %.3f exceeds Original %.3f for %s", variant.value,
                           accuracy[variant.value], original, label or 'model')
    logger.info("Backgrounds %s: %s", label or 'model',
                ' '.join(f"{k}={v:.3f}" for k, v in accuracy.items()))
    return table


def write_backgrounds_csv(path, tables):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(BackgroundsTable.header())
        for table in tables:
            writer.writerow(table.row())
