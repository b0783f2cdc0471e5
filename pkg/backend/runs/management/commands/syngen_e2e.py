from runs.services import PipelineRunner
from ._base import preset_path
from .run import Command as RunCommand


class Command(RunCommand):
    help = 'Synthetic end-to-end pipeline: generate, train all three stages, evaluate'

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument('--seed', type=int, default=0, help='Seed for both the generator and training')

    def run_command(self, **options):
        seed = options['seed']
        config = self.load_config(
            options, preset_path('syngen'),
            **{'run.seed': seed, 'syngen.seed': seed, 'run.source': 'syngen'},
        )
        self.summarize(PipelineRunner(config, command='syngen-e2e').run())
