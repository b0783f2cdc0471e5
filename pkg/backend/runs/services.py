"""
Pipeline orchestration: corpus -> training stages -> evaluation, one run
directory per invocation, mirrored into the run registry.
"""
import csv
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

from django.conf import settings
from django.utils import timezone

import rmsl
from evaluation.reports import render_reports
from evaluation.services import (
    REPORT_FILE, ROC_FILE, EvaluationService, load_report, read_roc_table, read_score_dump,
)
from ingest.records import VOCAB_FILE, Corpus
from ingest.services import CertIngestionService
from rmsl.exceptions import ConfigError
from rmsl.health import disk_snapshot
from syngen.services import generate_from_config
from training.services import TRAIN_LOG_FILE, ProgressiveTrainer, TrainConfig, parse_plan
from .config import ExperimentConfig, load_config
from .models import ExperimentRun, StageCheckpoint

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
CONFIG_FILE = 'config.ini'
ABLATION_FILE = 'ablation.tsv'
SWEEP_FILE = 'sweep.tsv'
CHECKPOINT_PATTERN = re.compile(r'^stage(\d+)\.pt$')


class RunDirectory:
    """Layout of one self-describing run directory"""

    def __init__(self, path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)

    @classmethod
    def create(cls, root, name, seed):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        base = f"{timezone.now().strftime('%Y%m%d-%H%M%S')}_{name}_seed{seed}"
        candidate, suffix = root / base, 1
        while candidate.exists():
            suffix += 1
            candidate = root / f"{base}_{suffix}"
        directory = cls(candidate)
        space = disk_snapshot(directory.path)
        logger.info(f"Run directory {directory.path} ({space['free_gb']} GB free)")
        return directory

    @property
    def corpus_dir(self):
        return self.path / 'corpus'

    @property
    def checkpoint_dir(self):
        return self.path / 'checkpoints'

    @property
    def eval_dir(self):
        return self.path / 'eval'

    @property
    def train_log(self):
        return self.path / TRAIN_LOG_FILE

    @property
    def config_path(self):
        return self.path / CONFIG_FILE

    @property
    def manifest_path(self):
        return self.path / MANIFEST_FILE

    def read_manifest(self):
        if not self.manifest_path.exists():
            return {}
        return json.loads(self.manifest_path.read_text(encoding='utf-8'))

    def write_manifest(self, manifest):
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8')

    def checkpoints(self) -> Dict[str, Path]:
        """Stage label -> checkpoint file, for every checkpoint on disk"""
        if not self.checkpoint_dir.exists():
            return {}
        found = {}
        for path in sorted(self.checkpoint_dir.iterdir()):
            match = CHECKPOINT_PATTERN.match(path.name)
            if match:
                found[match.group(1)] = path
        return found

    def latest_checkpoint(self, plan):
        """Checkpoint of the longest completed prefix of `plan`"""
        done = [label for label in self.checkpoints() if str(plan).startswith(label)]
        if not done:
            return None
        return self.checkpoints()[max(done, key=len)]


@dataclass
class PipelineOutcome:
    directory: RunDirectory
    report: Optional[object] = None
    training: Optional[object] = None
    record: Optional[ExperimentRun] = None


class PipelineRunner:
    """Runs one experiment configuration end to end"""

    def __init__(self, config: ExperimentConfig, command='run', run_root=None, device=None, registry=True):
        self.config = config
        self.command = command
        self.run_root = Path(run_root or settings.RMSL_RUN_DIR)
        self.device = config.run.get('device') or device or settings.RMSL_DEVICE
        self.registry = registry

    @property
    def train_config(self):
        return TrainConfig.from_section(self.config['train'])

    def new_directory(self, suffix=''):
        name = self.config.run['name'] + suffix
        return RunDirectory.create(self.run_root, name, self.config.seed)

    def prepare_corpus(self, directory: RunDirectory) -> Corpus:
        run = self.config.run
        if run.get('corpus_dir'):
            return Corpus.load(run['corpus_dir'])
        if (directory.corpus_dir / VOCAB_FILE).exists():
            return Corpus.load(directory.corpus_dir)
        if run['source'] == 'cert':
            return CertIngestionService(self.config['ingest']).run(directory.corpus_dir)
        corpus = generate_from_config(self.config['syngen'])
        corpus.save(directory.corpus_dir)
        return corpus

    def train(self, corpus, directory: RunDirectory, plan, resume=None):
        trainer = ProgressiveTrainer(
            corpus,
            self.train_config,
            model_options=self.config['model'],
            seed=self.config.seed,
            device=self.device,
            checkpoint_dir=directory.checkpoint_dir,
            log_path=directory.train_log,
        )
        return trainer.fit(plan, resume=resume)

    def evaluate(self, model, corpus, output_dir):
        eval_config = self.config['eval']
        service = EvaluationService(
            model,
            corpus,
            rule=self.train_config.topk_rule,
            fallback_threshold=eval_config['fallback_threshold'],
            budgets=eval_config['budgets'],
            batch_size=eval_config['batch_size'],
            device=self.device,
        )
        report = service.evaluate(output_dir)
        if eval_config['render_reports']:
            plot_reports(output_dir)
        return report

    def _manifest(self, directory, plan, status, **extra):
        manifest = {
            'name': self.config.run['name'],
            'command': self.command,
            'source': self.config.run['source'],
            'seed': self.config.seed,
            'stages': plan,
            'config': CONFIG_FILE,
            'config_hash': self.config.config_hash,
            'code_version': rmsl.__version__,
            'status': status,
            'checkpoints': {
                label: str(path.relative_to(directory.path)) for label, path in directory.checkpoints().items()
            },
        }
        manifest.update(extra)
        directory.write_manifest(manifest)
        return manifest

    def derive(self, overrides, command=None):
        """Runner for this config with `overrides` applied"""
        config = load_config(text=self.config.to_ini(), overrides=overrides)
        return PipelineRunner(config, command=command or self.command, run_root=self.run_root, device=self.device, registry=self.registry)

    def _summary_manifest(self, command, **extra):
        return dict(
            name=self.config.run['name'], command=command, seed=self.config.seed,
            config_hash=self.config.config_hash, code_version=rmsl.__version__, **extra,
        )

    def _register(self, directory, plan):
        if not self.registry:
            return None
        record, _ = ExperimentRun.objects.update_or_create(
            run_dir=str(directory.path),
            defaults={
                'name': self.config.run['name'],
                'command': self.command,
                'source': self.config.run['source'],
                'seed': self.config.seed,
                'stage_plan': plan,
                'config_hash': self.config.config_hash,
                'code_version': rmsl.__version__,
                'status': 'running',
                'error': '',
            },
        )
        return record

    def _finish(self, record, status, training=None, report=None, error=''):
        if record is None:
            return
        record.status = status
        record.error = error
        record.finished_at = timezone.now()
        if report is not None:
            record.metrics = report.as_dict()
        if training is not None:
            record.stage_reached = training.completed
            for outcome in training.outcomes:
                if outcome.checkpoint is None:
                    continue
                label = Path(outcome.checkpoint).stem.replace('stage', '')
                StageCheckpoint.objects.update_or_create(
                    run=record,
                    stage=label,
                    defaults={
                        'path': str(outcome.checkpoint),
                        'epochs': outcome.epochs,
                        'monitor': outcome.monitor,
                        'best_value': outcome.best_value,
                        'tau_c': outcome.tau_c,
                    },
                )
        record.save()

    def run(self, plan=None, directory: RunDirectory = None, resume=None, corpus=None, evaluate=True) -> PipelineOutcome:
        """Corpus, the stages of `plan`, then evaluation; failures leave a resumable directory"""
        plan = str(plan or self.config.run['stages'])
        check_plan(plan)
        directory = directory or self.new_directory()
        self.config.save(directory.config_path)
        self._manifest(directory, plan, 'running')
        record = self._register(directory, plan)
        try:
            corpus = corpus or self.prepare_corpus(directory)
            training = self.train(corpus, directory, plan, resume=resume)
            report = self.evaluate(training.model, corpus, directory.eval_dir) if evaluate else None
        except Exception as e:
            self._manifest(directory, plan, 'failed', error=str(e))
            self._finish(record, 'failed', error=str(e))
            logger.error(f"Run in {directory.path} failed: {e}")
            raise
        extra = {'stage_reached': training.completed}
        if report is not None:
            extra.update(report=f"eval/{REPORT_FILE}", metrics=report.as_dict())
        self._manifest(directory, plan, 'completed', **extra)
        self._finish(record, 'completed', training=training, report=report)
        return PipelineOutcome(directory=directory, report=report, training=training, record=record)

    def ablate(self, variants=('1', '2', '12', '123')) -> PipelineOutcome:
        """Train every stage variant on one shared corpus and tabulate their reports"""
        for variant in variants:
            check_plan(variant)
        directory = self.new_directory('-ablation')
        corpus = self.prepare_corpus(directory)
        rows = []
        for variant in variants:
            outcome = self.derive({'run.stages': variant}, 'ablate').run(
                directory=RunDirectory(directory.path / f"variant_{variant}"), corpus=corpus,
            )
            rows.append(dict(report_row(outcome.report), variant=variant))
        write_table(directory.path / ABLATION_FILE, ['variant'], rows)
        directory.write_manifest(self._summary_manifest('ablate', variants=list(variants), summary=ABLATION_FILE))
        logger.info(f"Ablation summary written to {directory.path / ABLATION_FILE}")
        return PipelineOutcome(directory=directory)

    def sweep(self, field, values) -> PipelineOutcome:
        """One full run per grid value of `field` ("section.name"), sharing one corpus"""
        if not values:
            raise ConfigError("Sweep needs at least one value", {'values': 'empty'})
        directory = self.new_directory('-sweep')
        # corpus fields need a fresh corpus per grid value
        corpus = None if field.split('.')[0] in ('syngen', 'ingest') else self.prepare_corpus(directory)
        rows = []
        for value in values:
            outcome = self.derive({field: value}, 'sweep').run(
                directory=RunDirectory(directory.path / f"{field}={value}"), corpus=corpus,
            )
            rows.append(dict(report_row(outcome.report), **{field: value}))
        write_table(directory.path / SWEEP_FILE, [field], rows)
        directory.write_manifest(self._summary_manifest('sweep', field=field, values=list(values), summary=SWEEP_FILE))
        logger.info(f"Sweep summary written to {directory.path / SWEEP_FILE}")
        return PipelineOutcome(directory=directory)


def report_row(report):
    row = {
        'auc': report.auc,
        'dr': report.dr,
        'fpr': report.fpr,
        'sequence_auc': '' if report.sequence_auc is None else report.sequence_auc,
    }
    row.update({f"dr@{budget}": value for budget, value in report.dr_at_budget.items()})
    return row


def write_table(path, leading, rows):
    columns = leading + [key for key in rows[0] if key not in leading]
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, delimiter='\t', lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)
    return path


def plot_reports(eval_dir, output_dir=None):
    """Render images and the PDF summary from an evaluation directory's artifacts"""
    eval_dir = Path(eval_dir)
    report = load_report(eval_dir / REPORT_FILE)
    fused, labels = read_score_dump(eval_dir / report.score_dump)
    fpr, tpr = read_roc_table(eval_dir / ROC_FILE)
    return render_reports(report, fpr, tpr, fused, labels, output_dir or eval_dir)


def resume_run(run_dir, device=None, registry=True) -> PipelineOutcome:
    """Continue a partial run from its last checkpoint using its own saved config"""
    directory = RunDirectory(run_dir)
    manifest = directory.read_manifest()
    if not directory.config_path.exists():
        raise ConfigError(f"No {CONFIG_FILE} in {directory.path}", {'run_dir': str(directory.path)})
    config = load_config(directory.config_path)
    plan = manifest.get('stages') or config.run['stages']
    checkpoint = directory.latest_checkpoint(plan)
    runner = PipelineRunner(config, command=manifest.get('command', 'run'), device=device, registry=registry)
    if checkpoint is not None:
        logger.info(f"Resuming {directory.path} from {checkpoint.name}")
    return runner.run(plan=plan, directory=directory, resume=checkpoint)


def check_plan(plan):
    try:
        return parse_plan(plan)
    except ValueError as e:
        raise ConfigError(str(e), {'run.stages': str(plan)})
