from django.core.management.base import CommandError

from runs.services import PipelineRunner, resume_run
from ._base import RMSLCommand


class Command(RMSLCommand):
    help = 'Run the whole pipeline from one config file, or resume a partial run directory'

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument('--resume', metavar='RUN_DIR', help='Continue a partial run from its last checkpoint')

    def run_command(self, **options):
        if options['resume']:
            outcome = resume_run(options['resume'])
        elif options['config']:
            outcome = PipelineRunner(self.load_config(options)).run()
        else:
            raise CommandError("Either --config or --resume is required", returncode=2)
        self.summarize(outcome)

    def summarize(self, outcome):
        report = outcome.report
        self.report(
            f"AUC={report.auc:.4f} DR={report.dr:.4f} FPR={report.fpr:.4f} "
            f"(threshold {report.threshold:.4f}, {report.threshold_source}) -> {outcome.directory.path}"
        )
