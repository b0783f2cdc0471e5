from runs.services import ABLATION_FILE, PipelineRunner
from ._base import RMSLCommand, preset_path


class Command(RMSLCommand):
    help = 'Train each stage variant on one shared corpus and summarize their reports'

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument('--variants', default='1,2,12,123', help='Comma-separated stage plans')

    def run_command(self, **options):
        config = self.load_config(options, preset_path('syngen'))
        variants = [v.strip() for v in options['variants'].split(',') if v.strip()]
        outcome = PipelineRunner(config, command='ablate').ablate(variants)
        self.stdout.write((outcome.directory.path / ABLATION_FILE).read_text(encoding='utf-8'))
        self.report(f"Ablation of {', '.join(variants)} -> {outcome.directory.path}")
