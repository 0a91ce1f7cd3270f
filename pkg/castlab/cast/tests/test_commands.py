import csv
import tempfile
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase

from cast.data import biased_bg_class, read_index
from cast.models import EvaluationReport, TrainingRun
from cast.training import FINAL, LATEST

TINY_CONFIG = """\
input_size = 16
channels = 2, 2
embedding_dim = 3
queue_size = 8
batch_size = 4
steps = 6
checkpoint_every = 3
lambda = 1.0
seed = 5
data_dir = {data}
output_dir = {out}
"""


class CommandTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def gen_data(self, name='data', count=12, seed=0, **options):
        out = self.dir / name
        call_command('gen_data', count=count, seed=seed, out=str(out), size=16, **options)
        return out

    def write_config(self, name, data, out):
        path = self.dir / f'{name}.cfg'
        path.write_text(TINY_CONFIG.format(data=data, out=out))
        return path

    def assertExitCode(self, code, *args, **options):
        with self.assertRaises(CommandError) as ctx:
            call_command(*args, **options)
        self.assertEqual(ctx.exception.returncode, code)


class GenDataTests(CommandTestCase):
    def test_same_seed_same_files(self):
        a = self.gen_data('a', count=4, seed=3)
        b = self.gen_data('b', count=4, seed=3)
        self.assertEqual((a / 'index.txt').read_bytes(), (b / 'index.txt').read_bytes())
        for name in ('scene_000002.ppm', 'scene_000002.pgm'):
            self.assertEqual((a / name).read_bytes(), (b / name).read_bytes())

    def test_full_bias(self):
        out = self.gen_data(count=20, bias=1.0)
        for _, fg, bg in read_index(out):
            self.assertEqual(bg, biased_bg_class(fg))

    def test_empty_dataset_warns(self):
        with self.assertLogs('cast.management.commands.gen_data', 'WARNING'):
            out = self.gen_data(count=0)
        self.assertEqual(read_index(out), [])

    def test_bad_arguments_exit_with_2(self):
        self.assertExitCode(2, 'gen_data', count=3, seed=0, out=str(self.dir / 'x'), bias=1.5)
        self.assertExitCode(2, 'gen_data', count=-1, seed=0, out=str(self.dir / 'x'))


class TrainCommandTests(CommandTestCase):
    def test_stop_and_resume_reproduce_the_final_checkpoint(self):
        data = self.gen_data()
        call_command('train', config=str(self.write_config('whole', data, self.dir / 'whole')))
        split = self.write_config('split', data, self.dir / 'split')
        call_command('train', config=str(split), stop_after=3)
        self.assertTrue((self.dir / 'split' / LATEST).exists())
        self.assertFalse((self.dir / 'split' / FINAL).exists())
        call_command('train', config=str(split), resume=True)
        self.assertEqual((self.dir / 'whole' / FINAL).read_bytes(), (self.dir / 'split' / FINAL).read_bytes())

        runs = TrainingRun.objects.order_by('created_at', 'id')
        self.assertEqual([r.status for r in runs], ['finished', 'stopped', 'finished'])
        self.assertEqual([r.steps_completed for r in runs], [6, 3, 6])
        self.assertTrue(runs[2].resumed)
        self.assertIn('lambda = 1.0', runs[0].config_text)

    def test_config_errors_exit_with_2(self):
        bad = self.dir / 'bad.cfg'
        bad.write_text('phi = 1.5\n')
        self.assertExitCode(2, 'train', config=str(bad))
        bad.write_text('seed = 1\n')
        self.assertExitCode(2, 'train', config=str(bad))
        self.assertExitCode(2, 'train', config=str(self.dir / 'missing.cfg'))
        self.assertFalse(TrainingRun.objects.exists())

    def test_missing_data_exits_with_1(self):
        config = self.write_config('nodata', self.dir / 'nowhere', self.dir / 'run')
        self.assertExitCode(1, 'train', config=str(config))


class EvaluationCommandTests(CommandTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.shared = tempfile.TemporaryDirectory()
        root = Path(cls.shared.name)
        cls.data = root / 'data'
        call_command('gen_data', count=12, seed=0, out=str(cls.data), size=16)
        config = root / 'run.cfg'
        config.write_text(TINY_CONFIG.format(data=cls.data, out=root / 'run'))
        call_command('train', config=str(config))
        cls.config = config
        cls.run_dir = root / 'run'
        # enough scenes that every class and its successor have donors
        cls.pool_data = root / 'pool'
        call_command('gen_data', count=120, seed=1, out=str(cls.pool_data), size=16)

    @classmethod
    def tearDownClass(cls):
        cls.shared.cleanup()
        super().tearDownClass()

    def test_grounding_on_two_checkpoints(self):
        out = self.dir / 'grounding'
        call_command('eval_grounding', str(self.run_dir / 'ckpt_000003.ckpt'), str(self.run_dir / FINAL),
                     data=str(self.data), config=str(self.config), out=str(out), seed=9)
        for label in ('run_ckpt_000003', 'run_final'):
            with open(self.dir / f'grounding_{label}.csv', newline='') as fh:
                rows = list(csv.reader(fh))
            self.assertEqual(rows[0], ['sample', 'iou', 'flag_both_empty'])
            self.assertEqual(len(rows), 13)
            self.assertTrue((self.dir / f'grounding_{label}_summary.txt').exists())
        reports = EvaluationReport.objects.filter(kind='grounding')
        self.assertEqual(reports.count(), 2)
        self.assertTrue(all(r.seed == 9 and r.sample_count == 12 for r in reports))

    def test_probe_grounding(self):
        out = self.dir / 'probe'
        call_command('eval_grounding', str(self.run_dir / FINAL), data=str(self.data), config=str(self.config),
                     out=str(out), probe=True, probe_epochs=5)
        self.assertTrue((self.dir / 'probe.csv').exists())
        self.assertEqual(EvaluationReport.objects.get().kind, 'probe_grounding')

    def test_backgrounds_table_has_one_row_per_checkpoint(self):
        out = self.dir / 'backgrounds.csv'
        call_command('eval_backgrounds', str(self.run_dir / 'ckpt_000003.ckpt'), str(self.run_dir / FINAL),
                     data=str(self.pool_data), out=str(out), probe_epochs=5, seed=4)
        with open(out, newline='') as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['model', 'Original', 'Mixed-Same', 'Mixed-Rand', 'Mixed-Next', 'Only-FG', 'No-FG',
                                   'Only-BG-B', 'Only-BG-T', 'count'])
        self.assertEqual([r[0] for r in rows[1:]], ['run_ckpt_000003', 'run_final'])
        self.assertTrue(all(r[-1] == '120' for r in rows[1:]))
        self.assertTrue(all(0.0 <= float(cell) <= 1.0 for r in rows[1:] for cell in r[1:-1]))
        reports = EvaluationReport.objects.filter(kind='backgrounds')
        self.assertEqual(reports.count(), 2)
        self.assertTrue(all(r.seed == 4 and r.sample_count == 120 for r in reports))

    def test_backgrounds_probe_is_trained_on_train_data(self):
        out = self.dir / 'backgrounds.csv'
        call_command('eval_backgrounds', str(self.run_dir / FINAL), data=str(self.pool_data), train_data=str(self.data),
                     out=str(out), probe_epochs=5)
        with open(out, newline='') as fh:
            self.assertEqual(len(list(csv.reader(fh))), 2)
        self.assertEqual(EvaluationReport.objects.get().kind, 'backgrounds')
        self.assertExitCode(1, 'eval_backgrounds', str(self.run_dir / FINAL), data=str(self.pool_data),
                            train_data=str(self.dir / 'nowhere'), out=str(self.dir / 'other.csv'), probe_epochs=5)
        self.assertEqual(EvaluationReport.objects.count(), 1)

    def test_backgrounds_pool_missing_a_class_exits_with_1(self):
        # three scenes can never hold both fg and fg + 1 for every class
        small = self.gen_data('small', count=3, seed=2)
        self.assertExitCode(1, 'eval_backgrounds', str(self.run_dir / FINAL), data=str(small),
                            out=str(self.dir / 'small.csv'), probe_epochs=5)
        self.assertFalse((self.dir / 'small.csv').exists())
        self.assertFalse(EvaluationReport.objects.exists())

    def test_visualize_writes_five_files_per_sample(self):
        out = self.dir / 'vis'
        call_command('visualize', str(self.run_dir / FINAL), data=str(self.data), config=str(self.config), out=str(out))
        self.assertEqual(len(list(out.iterdir())), 25)
        self.assertTrue((out / 'sample_0004_gradcam.ppm').read_bytes().startswith(b'P6'))
        self.assertEqual(EvaluationReport.objects.get().sample_count, 5)

    def test_crop_stats(self):
        out = self.dir / 'crops.csv'
        call_command('crop_stats', data=str(self.data), out=str(out), pairs_per_mask=3)
        with open(out, newline='') as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['cropping', 'phi', 'pairs', 'co_salient_rate', 'mean_coverage'])
        self.assertEqual(rows[1][0], 'constrained')
        self.assertEqual(rows[1][2], '36')
        self.assertEqual(rows[1][3], '1.0000')
        self.assertEqual(rows[2][1], '0.0')

    def test_missing_checkpoint_exits_with_1(self):
        self.assertExitCode(1, 'eval_grounding', str(self.dir / 'nope.ckpt'), data=str(self.data),
                            out=str(self.dir / 'g'))
        self.assertFalse(EvaluationReport.objects.exists())
