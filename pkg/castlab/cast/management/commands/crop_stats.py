import csv
import logging
from dataclasses import replace
from pathlib import Path

from django.core.management.base import BaseCommand

from cast.crop_sampler import crop_statistics
from cast.decorators import exit_codes
from cast.exceptions import ConfigError

from ._shared import add_eval_arguments, eval_seed, load_scenes, record_report, run_config

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Co-salient rate and salient coverage of constrained vs. unconstrained crop pairs"

    def add_arguments(self, parser):
        add_eval_arguments(parser, checkpoints=None)
        parser.add_argument('--pairs-per-mask', type=int, default=10, dest='pairs_per_mask')
        parser.add_argument('--out', help="Optional CSV path")

    @exit_codes
    def handle(self, *args, **options):
        if options['pairs_per_mask'] < 1:
            raise ConfigError('pairs-per-mask', f"must be >= 1, got {options['pairs_per_mask']}")
        constraint = run_config(options['config']).crop_constraint()
        seed = eval_seed(options)
        masks = [s.mask for s in load_scenes(options['data'], options['limit'])]

        rows = []
        # unconstrained cropping is phi = 0
        for name, c in (('constrained', constraint), ('unconstrained', replace(constraint, phi=0.0))):
            stats = crop_statistics(masks, c, seed, pairs_per_mask=options['pairs_per_mask'])
            rows.append([name, c.phi, stats.pairs, f'{stats.co_salient_rate:.4f}', f'{stats.mean_coverage:.4f}'])
            line = (f"{name} (phi={c.phi}): pairs={stats.pairs} co_salient_rate={stats.co_salient_rate:.4f} "
                    f"mean_coverage={stats.mean_coverage:.4f}")
            logger.info(line)
            self.stdout.write(line)

        out = options['out']
        if out:
            out = Path(out)
            out.parent.mkdir(parents=True, exist_ok=True)
            with open(out, 'w', newline='') as fh:
                writer = csv.writer(fh)
                writer.writerow(['cropping', 'phi', 'pairs', 'co_salient_rate', 'mean_coverage'])
                writer.writerows(rows)
        record_report('crop_stats', None, options['data'], out or '-', seed, len(masks),
                      '\n'.join(' '.join(str(v) for v in row) for row in rows))
