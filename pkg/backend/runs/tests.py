import csv
import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from rmsl.exceptions import ConfigError, DataError
from .config import load_config
from .models import ExperimentRun, StageCheckpoint
from .services import ABLATION_FILE, SWEEP_FILE, PipelineRunner, RunDirectory, resume_run

TINY_CONFIG = """
[run]
name = tiny
seed = 3

[syngen]
vocab_size = 15
num_patterns = 2
successors = 3
seq_len_min = 8
seq_len_max = 14
anomaly_span_min = 2
anomaly_span_max = 4
contamination = 0.3
num_train = 60
num_val = 20
num_test = 20
seed = 1

[model]
embedding_dim = 16
hidden_size = 16
context_dim = 16
num_prototypes = 4

[train]
lr_stage1 = 1e-3
lr_stage2 = 1e-3
lr_stage3 = 1e-4
batch_normal = 16
batch_anomalous = 8
epochs = 2
mc_passes = 3
eval_batch_size = 32

[eval]
batch_size = 32
render_reports = false
"""


def tiny_config(**overrides):
    return load_config(text=TINY_CONFIG, overrides=overrides)


class LoadConfigTests(SimpleTestCase):

    def test_defaults_fill_every_section(self):
        config = load_config(text='')
        self.assertEqual(config.run['source'], 'syngen')
        self.assertEqual(config['model']['num_prototypes'], 40)
        self.assertEqual(config['train']['lr_stage2'], 1e-5)
        self.assertEqual(config['eval']['budgets'], [0.05, 0.10, 0.15])
        self.assertEqual(config['ingest'], {})

    def test_errors_name_their_fields(self):
        text = "[model]\nalpha = 1.5\nwidth = 3\n[train]\nr_hi = 0.9\n[extra]\nx = 1\n"
        with self.assertRaises(ConfigError) as ctx:
            load_config(text=text)
        details = ctx.exception.details
        for path in ('model.alpha', 'model.width', 'train.r_mid', 'extra'):
            self.assertIn(path, details)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_cert_source_needs_data_dir(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config(text="[run]\nsource = cert\n")
        self.assertIn('ingest.data_dir', ctx.exception.details)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config('/nonexistent/rmsl.ini')

    def test_overrides_and_deviation_log(self):
        with self.assertLogs('runs.config', level='INFO') as logs:
            config = load_config(text='', overrides={'model.alpha': '0.1', 'eval.budgets': '0.01, 0.2'})
        self.assertEqual(config['model']['alpha'], 0.1)
        self.assertEqual(config['eval']['budgets'], [0.01, 0.2])
        self.assertTrue(any('model.alpha' in line for line in logs.output))
        with self.assertRaises(ConfigError) as ctx:
            load_config(text='', overrides={'nowhere': '1'})
        self.assertIn('nowhere', ctx.exception.details)

    def test_resolved_ini_reloads_to_the_same_hash(self):
        config = load_config(text="[run]\nsource = cert\n[ingest]\ndata_dir = /data/r4.2\ncut_date = 2011-01-01T00:00:00Z\n")
        again = load_config(text=config.to_ini())
        self.assertEqual(again.as_dict(), config.as_dict())
        self.assertEqual(again.config_hash, config.config_hash)
        self.assertNotEqual(tiny_config().config_hash, config.config_hash)

    def test_shipped_presets_are_valid(self):
        from django.conf import settings

        for name in ('syngen', 'cert_r42', 'cert_r52'):
            config = load_config(Path(settings.RMSL_CONFIG_DIR) / f"{name}.ini")
            self.assertEqual(config.run['stages'], '123')
        self.assertEqual(load_config(Path(settings.RMSL_CONFIG_DIR) / 'cert_r42.ini')['model']['alpha'], 0.1)


class PipelineRunnerTests(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def runner(self, config=None, **kwargs):
        return PipelineRunner(config or tiny_config(), run_root=self.root, **kwargs)

    def test_run_writes_self_describing_directory(self):
        outcome = self.runner().run()
        directory = outcome.directory
        self.assertTrue(directory.path.name.endswith('_tiny_seed3'))
        manifest = directory.read_manifest()
        self.assertEqual(manifest['status'], 'completed')
        self.assertEqual(manifest['stage_reached'], '123')
        self.assertEqual(manifest['config_hash'], tiny_config().config_hash)
        self.assertEqual(sorted(manifest['checkpoints']), ['1', '12', '123'])
        self.assertEqual(manifest['checkpoints']['123'], 'checkpoints/stage123.pt')
        for name in ('config.ini', 'train_log.jsonl', 'corpus/vocab.tsv', 'eval/report.json', 'eval/roc.tsv', 'eval/scores.tsv'):
            self.assertTrue((directory.path / name).exists(), name)
        self.assertEqual(load_config(directory.config_path).config_hash, manifest['config_hash'])

        record = ExperimentRun.objects.get(run_dir=str(directory.path))
        self.assertEqual(record.status, 'completed')
        self.assertEqual(record.stage_reached, '123')
        self.assertAlmostEqual(record.auc, outcome.report.auc)
        self.assertEqual(
            list(record.checkpoints.order_by('stage').values_list('stage', flat=True)), ['1', '12', '123']
        )

    def test_same_config_same_report(self):
        first = self.runner().run().directory
        second = self.runner().run().directory
        self.assertNotEqual(first.path, second.path)
        self.assertEqual(
            (first.path / 'eval' / 'report.json').read_bytes(),
            (second.path / 'eval' / 'report.json').read_bytes(),
        )

    def test_rerun_from_saved_config_reproduces_report(self):
        first = self.runner().run().directory
        replay = self.runner(load_config(first.config_path)).run().directory
        self.assertEqual(
            (first.path / 'eval' / 'report.json').read_bytes(),
            (replay.path / 'eval' / 'report.json').read_bytes(),
        )

    def test_resume_from_last_checkpoint(self):
        directory = self.runner().run().directory
        for label in ('12', '123'):
            (directory.checkpoint_dir / f"stage{label}.pt").unlink()
        self.assertEqual(directory.latest_checkpoint('123').name, 'stage1.pt')
        with self.assertLogs('runs.services', level='INFO') as logs:
            outcome = resume_run(directory.path)
        self.assertTrue(any('stage1.pt' in line for line in logs.output))
        self.assertEqual(outcome.training.completed, '123')
        self.assertEqual([o.stage for o in outcome.training.outcomes], [2, 3])
        self.assertTrue((directory.checkpoint_dir / 'stage123.pt').exists())

    def test_failure_is_recorded(self):
        runner = self.runner(tiny_config(**{'syngen.contamination': '0'}))
        with self.assertRaises(DataError):
            runner.run()
        record = ExperimentRun.objects.get()
        self.assertEqual(record.status, 'failed')
        self.assertTrue(record.error)
        manifest = RunDirectory(record.run_dir).read_manifest()
        self.assertEqual(manifest['status'], 'failed')
        self.assertEqual(list(manifest['checkpoints']), ['1'])

    def test_unknown_plan(self):
        with self.assertRaises(ConfigError):
            self.runner().run(plan='13')

    def test_train_only(self):
        outcome = self.runner().run(plan='12', evaluate=False)
        self.assertIsNone(outcome.report)
        self.assertFalse((outcome.directory.eval_dir / 'report.json').exists())
        self.assertEqual(StageCheckpoint.objects.count(), 2)

    def test_ablation_table(self):
        outcome = self.runner().ablate(['1', '12'])
        with open(outcome.directory.path / ABLATION_FILE, encoding='utf-8') as handle:
            rows = list(csv.DictReader(handle, delimiter='\t'))
        self.assertEqual([row['variant'] for row in rows], ['1', '12'])
        for row in rows:
            self.assertTrue(0.0 <= float(row['auc']) <= 1.0)
            self.assertIn('dr@5%', row)
        self.assertTrue((outcome.directory.path / 'variant_12' / 'eval' / 'report.json').exists())
        self.assertEqual(ExperimentRun.objects.filter(status='completed').count(), 2)

    def test_sweep_table(self):
        outcome = self.runner().sweep('model.alpha', ['0.0', '1.0'])
        with open(outcome.directory.path / SWEEP_FILE, encoding='utf-8') as handle:
            rows = list(csv.DictReader(handle, delimiter='\t'))
        self.assertEqual([row['model.alpha'] for row in rows], ['0.0', '1.0'])
        records = ExperimentRun.objects.filter(command='sweep')
        self.assertEqual(len({r.config_hash for r in records}), 2)

    def test_sweep_rejects_unknown_field(self):
        with self.assertRaises(ConfigError):
            self.runner().sweep('model.depth', ['2'])


class CommandTests(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.config_path = self.root / 'tiny.ini'
        self.config_path.write_text(TINY_CONFIG, encoding='utf-8')

    def test_config_error_exit_code(self):
        bad = self.root / 'bad.ini'
        bad.write_text("[model]\nnum_prototypes = 0\n", encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            call_command('run', config=str(bad))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('model.num_prototypes', str(ctx.exception))
        with self.assertRaises(CommandError) as ctx:
            call_command('run')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_data_error_exit_code(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('evaluate', ckpt=str(self.root / 'missing.pt'), corpus=str(self.root / 'nowhere'))
        self.assertEqual(ctx.exception.returncode, 3)

    def test_syngen_train_evaluate_plot(self):
        corpus_dir = self.root / 'corpus'
        run_dir = self.root / 'run'
        report_dir = self.root / 'report'
        call_command('syngen', config=str(self.config_path), seed=2, out=str(corpus_dir), stdout=StringIO())
        self.assertTrue((corpus_dir / 'vocab.tsv').exists())
        call_command(
            'train', config=str(self.config_path), stage='12', corpus=str(corpus_dir), out=str(run_dir),
            stdout=StringIO(),
        )
        checkpoint = run_dir / 'checkpoints' / 'stage12.pt'
        self.assertTrue(checkpoint.exists())
        call_command(
            'evaluate', config=str(self.config_path), ckpt=str(checkpoint), corpus=str(corpus_dir),
            out=str(report_dir), stdout=StringIO(),
        )
        report = json.loads((report_dir / 'report.json').read_text(encoding='utf-8'))
        self.assertEqual(report['behaviors'], sum(s.length for s in _test_split(corpus_dir)))
        call_command('plot', str(report_dir), stdout=StringIO())
        for name in ('roc.png', 'scores_hist.png', 'report.pdf'):
            self.assertTrue((report_dir / name).exists(), name)

    def test_syngen_e2e_seed_override(self):
        with override_settings(RMSL_RUN_DIR=self.root / 'runs'):
            call_command('syngen_e2e', config=str(self.config_path), seed=7, stdout=StringIO())
        record = ExperimentRun.objects.get()
        self.assertEqual(record.seed, 7)
        self.assertEqual(record.command, 'syngen-e2e')
        self.assertTrue(record.run_dir.endswith('_tiny_seed7'))
        saved = load_config(Path(record.run_dir) / 'config.ini')
        self.assertEqual(saved['syngen']['seed'], 7)


def _test_split(corpus_dir):
    from ingest.records import Corpus

    return Corpus.load(corpus_dir).test
