import logging
from pathlib import Path

import numpy as np
from django.core.management.base import BaseCommand

from cast.data import NUM_FG_CLASSES, ScenePool
from cast.decorators import exit_codes
from cast.encoder import PROBE_EPOCHS, linear_probe_train, normalize_pixels
from cast.evaluation import backgrounds_eval, write_backgrounds_csv
from cast.training import encoder_from_checkpoint

from ._shared import add_eval_arguments, check_checkpoints, checkpoint_label, eval_seed, load_scenes, record_report

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Linear-probe accuracy on the eight foreground/background variants, one row per checkpoint"

    def add_arguments(self, parser):
        add_eval_arguments(parser)
        parser.add_argument('--train-data', dest='train_data',
                            help="Scenes the linear probe is trained on (defaults to --data)")
        parser.add_argument('--out', required=True, help="Output CSV path")
        parser.add_argument('--probe-epochs', type=int, default=PROBE_EPOCHS, dest='probe_epochs')

    @exit_codes
    def handle(self, *args, **options):
        seed = eval_seed(options)
        checkpoints = check_checkpoints(options['checkpoints'])
        scenes = load_scenes(options['data'], options['limit'])
        train_scenes = load_scenes(options['train_data']) if options['train_data'] else scenes
        pool = ScenePool(scenes)
        several = len(checkpoints) > 1

        tables = []
        for path in checkpoints:
            label = checkpoint_label(path, several)
            params = encoder_from_checkpoint(path, 'query')
            images = np.stack([normalize_pixels(s.image) for s in train_scenes])
            probe = linear_probe_train(params, images, [s.fg_class for s in train_scenes],
                                       epochs=options['probe_epochs'], num_classes=NUM_FG_CLASSES, seed=seed)
            table = backgrounds_eval(params, probe, scenes, pool, seed, label=label)
            tables.append(table)
            self.stdout.write(' '.join([f'{label}:'] + [f'{k}={v:.3f}' for k, v in table.accuracy.items()]))

        out = Path(options['out'])
        write_backgrounds_csv(out, tables)
        for path, table in zip(checkpoints, tables):
            record_report('backgrounds', path, options['data'], out, seed, len(scenes),
                          ','.join(str(cell) for cell in table.row()))
        self.stdout.write(self.style.SUCCESS(f"Backgrounds table written to {out}"))
