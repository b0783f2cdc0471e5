from syngen.services import generate_from_config
from ._base import RMSLCommand, preset_path


class Command(RMSLCommand):
    help = 'Generate a synthetic behavior corpus with planted anomalous segments'

    uses_registry = False

    def add_arguments(self, parser):
        self.add_config_argument(parser)
        parser.add_argument('--seed', type=int, help='Generator seed (overrides syngen.seed)')
        parser.add_argument('--out', required=True, help='Corpus output directory')

    def run_command(self, **options):
        overrides = {}
        if options['seed'] is not None:
            overrides['syngen.seed'] = options['seed']
        config = self.load_config(options, preset_path('syngen'), **overrides)
        corpus = generate_from_config(config['syngen'])
        corpus.save(options['out'])
        self.describe_corpus(corpus, options['out'])
