import logging

from django.core.management.base import BaseCommand

from cast.config import format_run_config, load_run_config
from cast.decorators import exit_codes
from cast.exceptions import ConfigError
from cast.models import TrainingRun
from cast.training import train

from ._shared import finite_or_none, load_scenes

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Train the query/key encoders with the CAST loss"

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, help="Run config file (key = value lines)")
        parser.add_argument('--resume', action='store_true', help="Continue from <output_dir>/latest.ckpt")
        parser.add_argument('--stop-after', type=int, default=None, dest='stop_after',
                            help="Stop once this many steps are completed")

    @exit_codes
    def handle(self, *args, **options):
        config = load_run_config(options['config'])
        if not config.data_dir:
            raise ConfigError('data_dir', "required for training")
        if not config.output_dir:
            raise ConfigError('output_dir', "required for training")
        stop_after = options['stop_after']
        if stop_after is not None and stop_after < 0:
            raise ConfigError('stop-after', f"must be >= 0, got {stop_after}")

        scenes = load_scenes(config.data_dir)
        run = TrainingRun.objects.create(
            output_dir=config.output_dir,
            config_text=format_run_config(config),
            seed=config.seed,
            lam=config.lam,
            phi=config.phi,
            resumed=options['resume'],
        )
        try:
            summary = train(config, scenes, resume=options['resume'], stop_after=stop_after)
        except Exception:
            run.status = 'failed'
            run.save()
            raise

        run.status = 'finished' if summary.finished else 'stopped'
        run.steps_completed = summary.steps_completed
        run.total_steps = summary.total_steps
        run.last_loss = finite_or_none(summary.last_loss)
        run.checkpoint_path = str(summary.checkpoint)
        run.save()
        self.stdout.write(self.style.SUCCESS(
            f"{summary.steps_completed}/{summary.total_steps} steps, checkpoint {summary.checkpoint}"
        ))
