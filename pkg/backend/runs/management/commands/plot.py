from runs.services import plot_reports
from ._base import RMSLCommand


class Command(RMSLCommand):
    help = 'Render ROC and score-histogram images plus a PDF summary from an evaluation directory'

    uses_registry = False

    def add_arguments(self, parser):
        parser.add_argument('report_dir', help='Directory holding report.json, roc.tsv and scores.tsv')
        parser.add_argument('--out', help='Image directory; defaults to the report directory')

    def run_command(self, **options):
        paths = plot_reports(options['report_dir'], options['out'])
        for kind, path in paths.items():
            self.stdout.write(f"  {kind}: {path}")
        self.report("Plots rendered")
