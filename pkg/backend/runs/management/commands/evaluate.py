from pathlib import Path

from django.conf import settings

from detector.checkpoints import load_checkpoint
from evaluation.services import EvaluationService
from ingest.records import Corpus
from runs.services import plot_reports
from training.services import TrainConfig
from ._base import RMSLCommand


class Command(RMSLCommand):
    help = 'Score a corpus test split with a checkpoint and write the metrics report'

    uses_registry = False

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument('--ckpt', required=True, help='Checkpoint file')
        parser.add_argument('--corpus', required=True, help='Corpus directory')
        parser.add_argument('--out', default='report', help='Report directory')

    def run_command(self, **options):
        config = self.load_config(options)
        device = config.run.get('device') or settings.RMSL_DEVICE
        corpus = Corpus.load(options['corpus'])
        model, manifest = load_checkpoint(options['ckpt'], device=device, vocab_size=corpus.vocab.size)
        eval_config = config['eval']
        service = EvaluationService(
            model,
            corpus,
            rule=TrainConfig.from_section(config['train']).topk_rule,
            fallback_threshold=eval_config['fallback_threshold'],
            budgets=eval_config['budgets'],
            batch_size=eval_config['batch_size'],
            device=device,
        )
        output_dir = Path(options['out'])
        report = service.evaluate(output_dir)
        if eval_config['render_reports']:
            plot_reports(output_dir)
        self.report(
            f"Stage '{manifest['stage']}' checkpoint: AUC={report.auc:.4f} DR={report.dr:.4f} "
            f"FPR={report.fpr:.4f} -> {output_dir}"
        )
