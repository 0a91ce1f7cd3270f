import logging
from pathlib import Path

import numpy as np
from django.core.management.base import BaseCommand

from cast.data import NUM_FG_CLASSES
from cast.decorators import exit_codes
from cast.encoder import PROBE_EPOCHS, linear_probe_train, normalize_pixels
from cast.evaluation import grounding_eval, probe_grounding
from cast.training import pair_from_checkpoint

from ._shared import (add_eval_arguments, check_checkpoints, checkpoint_label, eval_seed, load_scenes,
                      record_report, run_config)

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Grad-CAM / saliency IoU of one or more checkpoints"

    def add_arguments(self, parser):
        add_eval_arguments(parser)
        parser.add_argument('--out', required=True, help="Output prefix for <out>.csv, _hist.csv and _summary.txt")
        parser.add_argument('--probe', action='store_true',
                            help="Ground the linear-probe logit of the true class instead of the key match")
        parser.add_argument('--probe-epochs', type=int, default=PROBE_EPOCHS, dest='probe_epochs')

    @exit_codes
    def handle(self, *args, **options):
        config = run_config(options['config'])
        seed = eval_seed(options)
        checkpoints = check_checkpoints(options['checkpoints'])
        scenes = load_scenes(options['data'], options['limit'])
        several = len(checkpoints) > 1
        out = Path(options['out'])

        for path in checkpoints:
            label = checkpoint_label(path, several)
            pair = pair_from_checkpoint(path, momentum=config.momentum)
            if options['probe']:
                kind = 'probe_grounding'
                images = np.stack([normalize_pixels(s.image) for s in scenes])
                probe = linear_probe_train(pair.query, images, [s.fg_class for s in scenes],
                                           epochs=options['probe_epochs'], num_classes=NUM_FG_CLASSES, seed=seed)
                report = probe_grounding(pair.query, probe, scenes, label=label)
            else:
                kind = 'grounding'
                report = grounding_eval(pair, scenes, config.crop_constraint(), seed,
                                        supervision_mode=config.supervision_mode, jitter=config.jitter,
                                        batch_size=config.batch_size, label=label)
            prefix = out.with_name(f'{out.name}_{label}') if several else out
            report.write(prefix)
            record_report(kind, path, options['data'], prefix, seed, len(report.ious), report.summary(),
                          mean_iou=report.mean_iou)
            self.stdout.write(report.summary())
