"""
The training loop.

Every random draw of step ``s`` comes from ``default_rng([seed, s, i])``
and the sample order of an epoch from ``default_rng([seed, epoch])``, so
the batch of a step depends only on the step number. Together with the
state stored in checkpoints this makes a resumed run identical to an
uninterrupted one.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cast_loss import cast_step
from .checkpoint import read_checkpoint, write_checkpoint
from .config import EFFECTIVE_CONFIG_NAME, dump_run_config
from .contrast import MomentumPair, NegativeQueue
from .encoder import embed_images, init_params, normalize_pixels, params_from_arrays
from .exceptions import CheckpointError, ConfigError, DatasetError

logger = logging.getLogger(__name__)

LOG_NAME = 'train_log.csv'
LOG_HEADER = ['step', 'L_cont', 'L_att', 'total', 'queue_fill', 'wall_ms']
LATEST = 'latest.ckpt'
FINAL = 'final.ckpt'


def checkpoint_name(step):
    return f'ckpt_{step:06d}.ckpt'


@dataclass
class TrainingState:
    pair: MomentumPair
    optimizer: ad.SGD
    queue: NegativeQueue
    step: int = 0


@dataclass
class TrainingSummary:
    steps_completed: int
    total_steps: int
    last_loss: float
    checkpoint: Path
    log_path: Path
    finished: bool


def new_state(config):
    params = init_params(config.encoder_config(), config.seed)
    pair = MomentumPair.from_query(params, config.momentum)
    optimizer = ad.SGD(pair.query, lr=config.lr, momentum=config.sgd_momentum, weight_decay=config.weight_decay)
    queue = NegativeQueue(config.queue_size, config.embedding_dim)
    return TrainingState(pair=pair, optimizer=optimizer, queue=queue)


def state_arrays(state):
    """Everything a resumed run needs, in a fixed order."""
    arrays = {}
    for name, t in state.pair.query.items():
        arrays[f'query.{name}'] = t.data
    for name, t in state.pair.key.items():
        arrays[f'key.{name}'] = t.data
    buffers = state.optimizer.state_dict()
    for name in state.pair.query:
        if name in buffers:
            arrays[f'sgd.{name}'] = buffers[name]
    arrays.update(state.queue.state_arrays())
    arrays['state.step'] = np.array([state.step], dtype=np.float32)
    arrays['meta.input_size'] = np.array([state.pair.query.config.input_size], dtype=np.float32)
    return arrays


def _section(arrays, prefix):
    return {name[len(prefix):]: data for name, data in arrays.items() if name.startswith(prefix)}


def _encoder(arrays, which, path, requires_grad):
    section = _section(arrays, f'{which}.')
    if not section:
        raise CheckpointError(f"{path}: no '{which}' parameters")
    if 'meta.input_size' not in arrays:
        raise CheckpointError(f"{path}: missing meta.input_size")
    return params_from_arrays(section, int(arrays['meta.input_size'][0]), requires_grad=requires_grad)


def encoder_from_checkpoint(path, which='query', requires_grad=False):
    """Encoder parameters (query or momentum copy) from a checkpoint.

    Grad-CAM needs ``requires_grad=True`` so that the activations are
    part of a graph; the parameters are still never updated.
    """
    return _encoder(read_checkpoint(path), which, path, requires_grad)


def pair_from_checkpoint(path, momentum=0.99):
    arrays = read_checkpoint(path)
    return MomentumPair(
        query=_encoder(arrays, 'query', path, requires_grad=True),
        key=_encoder(arrays, 'key', path, requires_grad=False),
        momentum=momentum,
    )


def load_state(path, config):
    arrays = read_checkpoint(path)
    for required in ('state.step', 'queue.storage', 'queue.state', 'meta.input_size'):
        if required not in arrays:
            raise CheckpointError(f"{path}: missing {required}")
    input_size = int(arrays['meta.input_size'][0])
    if input_size != config.input_size:
        raise CheckpointError(f"{path}: trained at input_size {input_size}, config says {config.input_size}")
    query = params_from_arrays(_section(arrays, 'query.'), input_size, requires_grad=True)
    key = params_from_arrays(_section(arrays, 'key.'), input_size, requires_grad=False)
    pair = MomentumPair(query=query, key=key, momentum=config.momentum)
    optimizer = ad.SGD(query, lr=config.lr, momentum=config.sgd_momentum, weight_decay=config.weight_decay)
    optimizer.load_state_dict(_section(arrays, 'sgd.'))
    queue = NegativeQueue.from_state_arrays(arrays)
    return TrainingState(pair=pair, optimizer=optimizer, queue=queue, step=int(arrays['state.step'][0]))


def save_state(state, path):
    write_checkpoint(path, state_arrays(state))


def total_steps(config, dataset_size):
    if config.steps:
        return config.steps
    return config.epochs * math.ceil(dataset_size / config.batch_size)


def batch_indices(step, dataset_size, batch_size, seed):
    """Indices of the samples used at ``step`` (0-based)."""
    per_epoch = math.ceil(dataset_size / batch_size)
    epoch, offset = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(dataset_size)
    return order[offset * batch_size:(offset + 1) * batch_size]


def prime_queue(state, scenes, indices):
    """Fill an empty queue with momentum-encoder embeddings of whole images."""
    images = np.stack([normalize_pixels(scenes[i].image) for i in indices])
    state.queue.enqueue_dequeue(embed_images(state.pair.key, images))
    logger.info("Primed the negative queue with %d key(s)", len(state.queue))


def _open_log(path, resume_step):
    """Open the CSV log for appending, dropping rows past the resumed step."""
    rows = []
    if resume_step and path.exists():
        with open(path, newline='') as fh:
            rows = [row for row in csv.reader(fh)][1:]
        rows = [row for row in rows if row and int(row[0]) <= resume_step]
    fh = open(path, 'w', newline='')
    writer = csv.writer(fh)
    writer.writerow(LOG_HEADER)
    writer.writerows(rows)
    return fh, writer


def train(config, scenes, output_dir=None, resume=False, stop_after=None):
    """Run (or continue) training and return a TrainingSummary.

    ``stop_after`` ends the run once that many steps are completed, with a
    checkpoint written, as if the process had been killed there.
    """
    if not scenes:
        raise DatasetError("training needs at least one scene")
    canvas = scenes[0].image.shape[-1]
    if canvas != config.input_size:
        raise ConfigError('input_size', f"{config.input_size} does not match the {canvas}px scenes in the dataset")
    output_dir = Path(output_dir or config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    dump_run_config(config, output_dir / EFFECTIVE_CONFIG_NAME)

    constraint = config.crop_constraint()
    loss_config = config.loss_config()
    n_steps = total_steps(config, len(scenes))
    latest = output_dir / LATEST
    if resume:
        if not latest.exists():
            raise CheckpointError(f"nothing to resume: {latest} does not exist")
        state = load_state(latest, config)
        logger.info("Resuming from %s at step %d", latest, state.step)
    else:
        state = new_state(config)

    log_fh, log = _open_log(output_dir / LOG_NAME, state.step if resume else 0)
    last_loss = float('nan')
    try:
        while state.step < n_steps:
            if stop_after is not None and state.step >= stop_after:
                break
            s = state.step
            indices = batch_indices(s, len(scenes), config.batch_size, config.seed)
            if len(state.queue) == 0:
                prime_queue(state, scenes, indices)
            batch = [(scenes[i].image, scenes[i].mask) for i in indices]
            seeds = [[config.seed, s, i] for i in range(len(batch))]
            result = cast_step(batch, state.pair, state.queue, state.optimizer, constraint, loss_config, seeds,
                               jitter=config.jitter)
            state.step += 1
            if math.isnan(result.loss):
                logger.warning("Step %d: every sample had an empty saliency mask, nothing learned", state.step)
            else:
                last_loss = result.loss
            log.writerow([state.step, f'{result.l_cont:.6f}', f'{result.l_att:.6f}', f'{result.loss:.6f}',
                          len(state.queue), f'{result.wall_ms:.1f}'])
            logger.debug("step %d L_cont=%.5f L_att=%.5f total=%.5f", state.step, result.l_cont, result.l_att,
                         result.loss)
            if state.step % config.checkpoint_every == 0:
                save_state(state, output_dir / checkpoint_name(state.step))
                save_state(state, latest)
                logger.info("Checkpoint at step %d", state.step)
    finally:
        log_fh.close()

    save_state(state, latest)
    finished = state.step >= n_steps
    checkpoint = latest
    if finished:
        checkpoint = output_dir / FINAL
        save_state(state, checkpoint)
        logger.info("Training finished after %d steps, last loss %.5f", state.step, last_loss)
    else:
        logger.info("Stopped after %d of %d steps", state.step, n_steps)
    return TrainingSummary(state.step, n_steps, last_loss, checkpoint, output_dir / LOG_NAME, finished)
