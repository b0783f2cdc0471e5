from runs.services import SWEEP_FILE, PipelineRunner
from ._base import RMSLCommand


class Command(RMSLCommand):
    help = 'Grid over one config field; each value is a full pipeline run'

    def add_arguments(self, parser):
        self.add_config_argument(parser, required=True)
        parser.add_argument('--field', required=True, help='section.field, e.g. model.num_prototypes')
        parser.add_argument('--values', required=True, help='Comma-separated grid values')

    def run_command(self, **options):
        config = self.load_config(options)
        values = [v.strip() for v in options['values'].split(',') if v.strip()]
        outcome = PipelineRunner(config, command='sweep').sweep(options['field'], values)
        self.stdout.write((outcome.directory.path / SWEEP_FILE).read_text(encoding='utf-8'))
        self.report(f"Sweep over {options['field']} -> {outcome.directory.path}")
