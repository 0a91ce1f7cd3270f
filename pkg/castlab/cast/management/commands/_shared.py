"""Helpers shared by the cast management commands."""
import math
from pathlib import Path

from django.conf import settings

from cast.config import RunConfig, load_run_config
from cast.data import read_dataset
from cast.exceptions import CheckpointError, DatasetError
from cast.models import EvaluationReport


def add_eval_arguments(parser, checkpoints='+'):
    if checkpoints:
        parser.add_argument('checkpoints', nargs=checkpoints, help="Checkpoint file(s) written by train")
    parser.add_argument('--data', required=True, help="Dataset directory written by gen_data")
    parser.add_argument('--config', help="Run config for crop and supervision settings (defaults otherwise)")
    parser.add_argument('--seed', type=int, default=None, help="Evaluation seed (CAST_EVAL_SEED by default)")
    parser.add_argument('--limit', type=int, default=None, help="Use at most this many scenes")


def run_config(path):
    return load_run_config(path) if path else RunConfig().validate()


def eval_seed(options):
    return settings.CAST_EVAL_SEED if options['seed'] is None else options['seed']


def load_scenes(directory, limit=None):
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory {directory} does not exist")
    return read_dataset(directory, limit=limit)


def check_checkpoints(paths):
    paths = [Path(p) for p in paths]
    for path in paths:
        if not path.is_file():
            raise CheckpointError(f"checkpoint {path} does not exist")
    return paths


def checkpoint_label(path, several):
    """A run name for tables and file names: the run directory, plus the file stem when ambiguous."""
    path = Path(path)
    if not several:
        return path.parent.name or path.stem
    return f'{path.parent.name}_{path.stem}' if path.parent.name else path.stem


def finite_or_none(value):
    return value if value is not None and math.isfinite(value) else None


def record_report(kind, checkpoint, data_dir, output_path, seed, sample_count, summary, mean_iou=None):
    return EvaluationReport.objects.create(
        kind=kind,
        checkpoint_path=str(checkpoint or ''),
        data_dir=str(data_dir),
        output_path=str(output_path),
        seed=seed,
        sample_count=sample_count,
        mean_iou=finite_or_none(mean_iou),
        summary=summary,
    )
