from django.core.management.base import CommandError

from ingest.services import CertIngestionService
from ._base import RMSLCommand


class Command(RMSLCommand):
    help = 'Parse CERT-style activity logs into a temporally split behavior corpus'

    uses_registry = False

    def add_arguments(self, parser):
        self.add_config_argument(parser, required=True)
        parser.add_argument('--out', required=True, help='Corpus output directory')

    def run_command(self, **options):
        config = self.load_config(options, **{'run.source': 'cert'})
        if not config['ingest']:
            raise CommandError("The config has no [ingest] section", returncode=2)
        corpus = CertIngestionService(config['ingest']).run(options['out'])
        self.describe_corpus(corpus, options['out'])
