from pathlib import Path

from django.core.management.base import BaseCommand

from cast.decorators import exit_codes
from cast.exceptions import ConfigError
from cast.training import pair_from_checkpoint
from cast.visualize import visualize_scenes

from ._shared import add_eval_arguments, check_checkpoints, eval_seed, load_scenes, record_report, run_config


class Command(BaseCommand):
    help = "Export query, key, masked key, Grad-CAM overlay and saliency images per sample"

    def add_arguments(self, parser):
        add_eval_arguments(parser, checkpoints=None)
        parser.add_argument('checkpoint', help="Checkpoint file written by train")
        parser.add_argument('--out', required=True, help="Output directory")
        parser.add_argument('--count', type=int, default=5, help="Number of scenes to export")

    @exit_codes
    def handle(self, *args, **options):
        if options['count'] < 1:
            raise ConfigError('count', f"must be >= 1, got {options['count']}")
        config = run_config(options['config'])
        seed = eval_seed(options)
        (path,) = check_checkpoints([options['checkpoint']])
        limit = options['count'] if options['limit'] is None else min(options['count'], options['limit'])
        scenes = load_scenes(options['data'], limit)
        pair = pair_from_checkpoint(path, momentum=config.momentum)
        out = Path(options['out'])
        written = visualize_scenes(pair.query, pair.key, scenes, config.crop_constraint(), seed, out,
                                   jitter=config.jitter)
        record_report('visualize', path, options['data'], out, seed, len(written) // 5,
                      f"{len(written)} files")
        self.stdout.write(self.style.SUCCESS(f"{len(written)} file(s) written to {out}"))
