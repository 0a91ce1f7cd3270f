import logging
from pathlib import Path

from django.core.management.base import BaseCommand

from cast.data import NUM_FG_CLASSES, gen_dataset, write_dataset
from cast.decorators import exit_codes
from cast.exceptions import ConfigError

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Generate synthetic scenes with saliency masks (PPM/PGM) and an index file"

    def add_arguments(self, parser):
        parser.add_argument('--count', type=int, required=True)
        parser.add_argument('--seed', type=int, required=True)
        parser.add_argument('--out', required=True, help="Output directory")
        parser.add_argument('--bias', type=float, default=0.0,
                            help="Fraction of scenes whose background class follows the foreground class")
        parser.add_argument('--size', type=int, default=64, help="Canvas size in pixels")

    @exit_codes
    def handle(self, *args, **options):
        count, bias, size = options['count'], options['bias'], options['size']
        if count < 0:
            raise ConfigError('count', f"must be >= 0, got {count}")
        if not 0.0 <= bias <= 1.0:
            raise ConfigError('bias', f"must lie in [0, 1], got {bias}")
        if size < 10:
            raise ConfigError('size', f"must be >= 10, got {size}")
        if count == 0:
            logger.warning("--count 0: writing an empty dataset")
        elif count < NUM_FG_CLASSES:
            logger.info("Only %d scenes: some foreground classes will be missing", count)

        out = Path(options['out'])
        scenes = gen_dataset(count, options['seed'], canvas_size=size, bias=bias)
        write_dataset(out, scenes)
        self.stdout.write(self.style.SUCCESS(f"{count} scene(s) written to {out}"))
