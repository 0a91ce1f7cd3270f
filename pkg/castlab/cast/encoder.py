"""
Small convolutional encoder standing in for a ResNet backbone.

Three stride-2 conv stages (3x3, padding 1, ReLU) reduce a 64x64 input to
an 8x8 grid; global average pooling, one linear projection and L2
normalization give the embedding. The last post-ReLU activation map is
returned alongside the embedding because Grad-CAM needs it.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, DatasetError, ShapeError

logger = logging.getLogger(__name__)

# pixels in [0, 1] are mapped to [-1, 1] before entering the encoder
PIXEL_MEAN = 0.5
PIXEL_STD = 0.5
PROBE_EPOCHS = 500
WHITENING_RIDGE = 1e-3


def normalize_pixels(image):
    return ((np.asarray(image, dtype=np.float32) - PIXEL_MEAN) / PIXEL_STD).astype(np.float32)


def denormalize_pixels(image):
    return np.clip(np.asarray(image, dtype=np.float32) * PIXEL_STD + PIXEL_MEAN, 0.0, 1.0)


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 64
    channels: tuple = (16, 32, 64)
    embedding_dim: int = 64
    in_channels: int = 3
    kernel_size: int = 3
    eps: float = 1e-12

    @property
    def grid_size(self):
        return self.input_size // 2 ** len(self.channels)

    def validate(self):
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ConfigError('channels', f"need positive stage widths, got {self.channels}")
        if self.embedding_dim <= 0:
            raise ConfigError('embedding_dim', f"must be positive, got {self.embedding_dim}")
        if self.input_size <= 0 or self.input_size % 2 ** len(self.channels):
            raise ConfigError(
                'input_size',
                f"{self.input_size} is not divisible by 2^{len(self.channels)} (one halving per stage)",
            )
        return self


class ParameterSet(dict):
    """Named encoder parameters plus the config they were built for."""

    def __init__(self, config, tensors=()):
        super().__init__(tensors)
        self.config = config

    def copy(self, requires_grad=None):
        tensors = {}
        for name, t in self.items():
            flag = t.requires_grad if requires_grad is None else requires_grad
            tensors[name] = ad.Tensor(t.data.copy(), requires_grad=flag, name=name)
        return ParameterSet(self.config, tensors)

    def arrays(self):
        return {name: t.data for name, t in self.items()}


@dataclass
class EncoderOutput:
    embedding: ad.Tensor
    conv5_acts: ad.Tensor


def param_shapes(config):
    shapes = {}
    k = config.kernel_size
    previous = config.in_channels
    for i, width in enumerate(config.channels):
        shapes[f'conv{i + 1}.weight'] = (width, previous, k, k)
        shapes[f'conv{i + 1}.bias'] = (width,)
        previous = width
    shapes['fc.weight'] = (config.embedding_dim, previous)
    shapes['fc.bias'] = (config.embedding_dim,)
    return shapes


def init_params(config, seed):
    """Fan-in scaled uniform weights (variance 2/fan_in), zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith('.bias'):
            data = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = ad.Tensor(data, requires_grad=True, name=name)
    return ParameterSet(config, tensors)


def params_from_arrays(arrays, input_size, eps=1e-12, requires_grad=True):
    """Rebuild a ParameterSet from raw arrays (as stored in a checkpoint)."""
    stages = sum(1 for name in arrays if name.startswith('conv') and name.endswith('.weight'))
    if stages == 0 or 'fc.weight' not in arrays:
        raise ShapeError(f"arrays do not describe an encoder: {sorted(arrays)}")
    channels = tuple(int(arrays[f'conv{i + 1}.weight'].shape[0]) for i in range(stages))
    config = EncoderConfig(
        input_size=int(input_size),
        channels=channels,
        embedding_dim=int(arrays['fc.weight'].shape[0]),
        in_channels=int(arrays['conv1.weight'].shape[1]),
        kernel_size=int(arrays['conv1.weight'].shape[2]),
        eps=eps,
    ).validate()
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name not in arrays:
            raise ShapeError(f"missing encoder parameter {name}")
        if tuple(arrays[name].shape) != shape:
            raise ShapeError(f"{name} has shape {tuple(arrays[name].shape)}, expected {shape}")
        tensors[name] = ad.Tensor(arrays[name], requires_grad=requires_grad, name=name)
    return ParameterSet(config, tensors)


def forward_batch(params, images):
    """Encode a batch [N,3,H,W] of normalized images."""
    config = params.config
    x = ad.as_tensor(images)
    expected = (config.in_channels, config.input_size, config.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"encoder expects input [N,{','.join(map(str, expected))}], got {x.shape}")
    pad = config.kernel_size // 2
    h = x
    for i in range(len(config.channels)):
        w = params[f'conv{i + 1}.weight']
        b = ad.reshape(params[f'conv{i + 1}.bias'], (1, w.shape[0], 1, 1))
        h = ad.relu(ad.conv2d(h, w, stride=2, padding=pad) + b)
    conv5_acts = h
    pooled = ad.global_avg_pool(conv5_acts)
    projected = pooled @ ad.transpose(params['fc.weight']) + params['fc.bias']
    embedding = ad.l2_normalize(projected, eps=config.eps, axis=1)
    return EncoderOutput(embedding=embedding, conv5_acts=conv5_acts)


def forward(params, image):
    """Encode one normalized image [3,H,W]."""
    image = ad.as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"forward expects one image [3,H,W], got {image.shape}")
    out = forward_batch(params, ad.reshape(image, (1,) + image.shape))
    d = out.embedding.shape[1]
    return EncoderOutput(
        embedding=ad.reshape(out.embedding, (d,)),
        conv5_acts=ad.reshape(out.conv5_acts, out.conv5_acts.shape[1:]),
    )


def embed_images(params, images, batch_size=64):
    """Embeddings of normalized images as a float32 array, without a graph."""
    images = np.asarray(images, dtype=np.float32)
    chunks = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            chunks.append(forward_batch(params, images[start:start + batch_size]).embedding.data)
    if not chunks:
        return np.zeros((0, params.config.embedding_dim), dtype=np.float32)
    return np.concatenate(chunks)


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    accuracy: float
    degenerate: bool = False

    def logits(self, features):
        return np.asarray(features, dtype=np.float32) @ self.weight.T + self.bias

    def predict(self, features):
        return np.argmax(self.logits(features), axis=1)


def train_linear_classifier(features, labels, num_classes, epochs=PROBE_EPOCHS, lr=0.5, seed=0):
    """Softmax cross-entropy linear classifier, full-batch SGD with momentum.

    Features are PCA-whitened while training, so one step size suits every
    direction of the embedding; the whitening is folded back into the
    returned weight and bias, so the probe stays linear in the raw
    embedding.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(features) == 0:
        raise DatasetError("cannot train a linear probe on an empty dataset")
    if len(features) != len(labels):
        raise ShapeError(f"{len(features)} feature rows but {len(labels)} labels")
    degenerate = len(np.unique(labels)) < 2
    if degenerate:
        logger.warning("Linear probe trained on a single class (%d); accuracy is trivially 1.0", labels[0])

    mean = features.astype(np.float64).mean(axis=0)
    centered = features.astype(np.float64) - mean
    eigvals, eigvecs = np.linalg.eigh(centered.T @ centered / len(features))
    eigvals = np.clip(eigvals, 0.0, None)
    ridge = max(WHITENING_RIDGE * eigvals.max(initial=0.0), 1e-8)
    # whitened = (features - mean) @ projection
    projection = eigvecs / np.sqrt(eigvals + ridge)
    rng = np.random.default_rng(seed)
    dim = features.shape[1]
    params = {
        'weight': ad.Tensor(rng.normal(0.0, 0.01, size=(num_classes, dim)), requires_grad=True),
        'bias': ad.Tensor(np.zeros(num_classes), requires_grad=True),
    }
    optimizer = ad.SGD(params, lr=lr, momentum=0.9)
    x = ad.Tensor(centered @ projection)
    onehot = ad.Tensor(np.eye(num_classes, dtype=np.float32)[labels])
    loss = None
    for epoch in range(epochs):
        logits = x @ ad.transpose(params['weight']) + params['bias']
        picked = ad.sum_(logits * onehot, axis=1)
        loss = ad.mean(ad.logsumexp(logits, axis=1) - picked)
        grads = ad.grad(loss, [params['weight'], params['bias']])
        optimizer.step(dict(zip(params, grads)))
        logger.debug("probe epoch %d loss %.5f", epoch, loss.item())
    if loss is not None:
        logger.info("Linear probe loss after %d epochs: %.5f", epochs, loss.item())

    weight = params['weight'].data.astype(np.float64) @ projection.T
    bias = params['bias'].data.astype(np.float64) - weight @ mean
    result = ProbeResult(weight=weight.astype(np.float32), bias=bias.astype(np.float32), accuracy=0.0,
                         degenerate=degenerate)
    result.accuracy = float(np.mean(result.predict(features) == labels))
    return result


def linear_probe_train(frozen_encoder, images, labels, epochs=PROBE_EPOCHS, num_classes=None, lr=0.5, seed=0):
    """Train a linear classifier on embeddings of a frozen encoder.

    The encoder parameters are only read.
    """
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise DatasetError("cannot train a linear probe on an empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    features = embed_images(frozen_encoder, images)
    result = train_linear_classifier(features, labels, num_classes, epochs=epochs, lr=lr, seed=seed)
    logger.info("Linear probe: %d samples, %d classes, train accuracy %.3f", len(labels), num_classes,
                result.accuracy)
    return result
