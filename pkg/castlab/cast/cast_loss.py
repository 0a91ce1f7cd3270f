"""
Attention supervision: masked keys, Grad-CAM of the query/masked-key
match, the cosine attention loss, and the full training step.

Grad-CAM weights are gradients, so the attention loss is differentiated
through a gradient. ``grad_cam`` asks the engine to record its backward
pass (``build_graph=True``) for exactly that reason.
"""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .contrast import info_nce, momentum_update
from .crop_sampler import SaliencyMask, apply_crop, make_view_pair, restrict_to_rect
from .encoder import forward_batch
from .exceptions import ConfigError, DegenerateMaskError, ShapeError

logger = logging.getLogger(__name__)

SUPERVISION_MODES = ('full', 'intersection')


@dataclass(frozen=True)
class LossConfig:
    lam: float = 3.0
    tau: float = 0.07
    supervision_mode: str = 'full'
    eps: float = 1e-8
    first_order: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError('lambda', f"must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ConfigError('tau', f"must be > 0, got {self.tau}")
        if self.eps <= 0:
            raise ConfigError('eps', f"must be > 0, got {self.eps}")
        if self.supervision_mode not in SUPERVISION_MODES:
            raise ConfigError('supervision_mode', f"must be one of {SUPERVISION_MODES}, got {self.supervision_mode!r}")


@dataclass
class GradCamMap:
    grid: ad.Tensor
    alpha: ad.Tensor


def mask_key(x_k, m_k):
    """Zero the non-salient pixels of the key crop, channel by channel."""
    x_k = np.asarray(x_k, dtype=np.float32)
    if isinstance(m_k, SaliencyMask):
        bits = m_k.bits
    elif isinstance(m_k, (list, tuple)):
        bits = np.stack([m.bits for m in m_k])
    else:
        bits = np.asarray(m_k)
    if x_k.ndim == 3 and bits.shape != x_k.shape[1:]:
        raise ShapeError(f"mask {bits.shape} does not match image {x_k.shape}")
    if x_k.ndim == 4 and bits.shape != (x_k.shape[0],) + x_k.shape[2:]:
        raise ShapeError(f"masks {bits.shape} do not match images {x_k.shape}")
    return x_k * np.expand_dims(bits.astype(np.float32), axis=-3)


def attention_target(mask, grid_size):
    """Area-average the mask down to the conv grid (values in [0, 1])."""
    bits = mask.bits.astype(np.float32)
    h, w = bits.shape
    if h % grid_size == 0 and w % grid_size == 0:
        return bits.reshape(grid_size, h // grid_size, grid_size, w // grid_size).mean(axis=(1, 3))
    resized = Image.fromarray(bits).resize((grid_size, grid_size), Image.Resampling.BOX)
    return np.asarray(resized, dtype=np.float32)


def grad_cam_from_score(score, conv5_acts, build_graph=True, first_order=False):
    """Grad-CAM of a scalar score over a [..., C, g, g] activation map.

    alpha_c is the spatial sum of d(score)/dA_c; the map is
    ReLU(sum_c alpha_c * A_c).
    """
    grads = ad.grad(score, [conv5_acts], build_graph=build_graph and not first_order)[0]
    alpha = ad.sum_(grads, axis=(-2, -1), keepdims=True)
    if first_order:
        alpha = ad.detach(alpha)
    grid = ad.relu(ad.sum_(alpha * conv5_acts, axis=-3))
    return GradCamMap(grid=grid, alpha=alpha)


def grad_cam(q, k_m, conv5_acts, build_graph=True, first_order=False):
    """Grad-CAM of the query/masked-key dot product.

    For a batch the per-sample dot products are summed; samples do not
    share activations, so each map only sees its own match.
    """
    score = ad.sum_(q * ad.detach(k_m))
    return grad_cam_from_score(score, conv5_acts, build_graph=build_graph, first_order=first_order)


def attention_loss(grid, target, eps=1e-8):
    """1 - cosine(G, M_q), batch-averaged; an all-zero G scores 1."""
    grid = ad.as_tensor(grid)
    target = np.asarray(target, dtype=np.float32)
    if grid.shape != target.shape:
        raise ShapeError(f"Grad-CAM grid {grid.shape} and target {target.shape} differ")
    n = 1 if grid.ndim == 2 else grid.shape[0]
    g = ad.reshape(grid, (n, int(np.prod(grid.shape[-2:]))))
    t = target.reshape(n, -1)
    t_norm = np.maximum(np.sqrt((t * t).sum(axis=1, keepdims=True)), np.float32(eps))
    g_norm = ad.sqrt(ad.maximum(ad.sum_(g * g, axis=1, keepdims=True), eps * eps))
    cosine = ad.sum_(g * ad.Tensor(t / t_norm), axis=1, keepdims=True) / g_norm
    return ad.mean(1.0 - cosine)


def supervision_mask(view, mode, out_size):
    """M_q, or in ``intersection`` mode only the part also seen by the key crop."""
    if mode == 'full':
        return view.m_q
    return apply_crop(restrict_to_rect(view.source_mask, view.crop_k), view.crop_q, out_size)


@dataclass
class CastLoss:
    total: ad.Tensor
    l_cont: ad.Tensor
    l_att: ad.Tensor = None
    keys: np.ndarray = field(default=None, repr=False)
    cam: GradCamMap = field(default=None, repr=False)


def compute_cast_loss(views, pair, negatives, loss_config):
    """L_cont + lambda * L_att for a batch of view pairs.

    The key and masked-key embeddings come from the momentum encoder
    without a graph. With lambda = 0 the attention branch is not built.
    """
    x_q = np.stack([v.x_q for v in views])
    x_k = np.stack([v.x_k for v in views])
    out_q = forward_batch(pair.query, x_q)
    with ad.no_grad():
        keys = forward_batch(pair.key, x_k).embedding.data
    l_cont = info_nce(out_q.embedding, keys, negatives, loss_config.tau)
    result = CastLoss(total=l_cont, l_cont=l_cont, keys=keys)
    if loss_config.lam == 0:
        return result

    x_km = mask_key(x_k, [v.m_k for v in views])
    with ad.no_grad():
        masked_keys = forward_batch(pair.key, x_km).embedding.data
    cam = grad_cam(out_q.embedding, masked_keys, out_q.conv5_acts,
                   build_graph=True, first_order=loss_config.first_order)
    grid_size = out_q.conv5_acts.shape[-1]
    out_size = x_q.shape[-1]
    targets = np.stack([
        attention_target(supervision_mask(v, loss_config.supervision_mode, out_size), grid_size)
        for v in views
    ])
    l_att = attention_loss(cam.grid, targets, loss_config.eps)
    result.l_att = l_att
    result.cam = cam
    result.total = l_cont + l_att * loss_config.lam
    return result


def build_views(batch, constraint, seeds, jitter=0.4, out_size=None):
    """View pairs for (image, mask) samples; degenerate masks are skipped and counted."""
    views, skipped = [], 0
    for (image, mask), seed in zip(batch, seeds):
        rng = np.random.default_rng(seed)
        try:
            views.append(make_view_pair(image, mask, constraint, rng, out_size=out_size, jitter=jitter))
        except DegenerateMaskError:
            skipped += 1
    if skipped:
        logger.info("Skipped %d sample(s) with an empty saliency mask", skipped)
    return views, skipped


@dataclass
class StepResult:
    loss: float
    l_cont: float
    l_att: float
    grads: dict = field(repr=False)
    skipped: int = 0
    wall_ms: float = 0.0


def cast_step(batch, pair, queue, optimizer, constraint, loss_config, seeds, jitter=0.4):
    """One training step: views, CAST loss, SGD on the query network,
    momentum update of the key network, then enqueue the unmasked keys."""
    started = time.perf_counter()
    views, skipped = build_views(batch, constraint, seeds, jitter)
    if not views:
        return StepResult(float('nan'), float('nan'), float('nan'), {}, skipped)
    loss = compute_cast_loss(views, pair, queue.negatives(), loss_config)
    names = list(pair.query)
    grads = ad.grad(loss.total, [pair.query[name] for name in names])
    grads = dict(zip(names, grads))
    optimizer.step(grads)
    momentum_update(pair)
    # masked keys never enter the queue
    queue.enqueue_dequeue(loss.keys)
    return StepResult(
        loss=loss.total.item(),
        l_cont=loss.l_cont.item(),
        l_att=loss.l_att.item() if loss.l_att is not None else 0.0,
        grads={name: g.data for name, g in grads.items()},
        skipped=skipped,
        wall_ms=(time.perf_counter() - started) * 1000.0,
    )
