"""
Shared plumbing for the pipeline management commands
"""
import logging
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError
from django.db import connection

from rmsl.exceptions import RMSLError
from runs.config import load_config
from runs.models import ExperimentRun

logger = logging.getLogger('runs')


def parse_overrides(pairs):
    """["section.field=value", ...] -> {"section.field": "value"}"""
    overrides = {}
    for pair in pairs or ():
        key, sep, value = pair.partition('=')
        if not sep:
            raise CommandError(f"Override '{pair}' must look like section.field=value", returncode=2)
        overrides[key.strip()] = value.strip()
    return overrides


def preset_path(name):
    return Path(settings.RMSL_CONFIG_DIR) / f"{name}.ini"


class RMSLCommand(BaseCommand):
    """Maps domain errors onto CommandError exit codes"""

    uses_registry = True

    def add_config_argument(self, parser, required=False, default=None):
        parser.add_argument('--config', required=required, default=default, help='Experiment INI file')
        parser.add_argument(
            '--set', dest='overrides', action='append', default=[], metavar='SECTION.FIELD=VALUE',
            help='Override one config value (repeatable)',
        )

    def load_config(self, options, path=None, **overrides):
        """Config from --config (or `path`), with --set values applied over `overrides`"""
        overrides.update(parse_overrides(options.get('overrides')))
        return load_config(options.get('config') or path, overrides=overrides)

    def ensure_registry(self):
        if ExperimentRun._meta.db_table not in connection.introspection.table_names():
            logger.info("Creating run registry tables")
            call_command('migrate', verbosity=0, interactive=False)

    def handle(self, *args, **options):
        try:
            if self.uses_registry:
                self.ensure_registry()
            return self.run_command(**options)
        except RMSLError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise CommandError(self.describe_error(e), returncode=e.exit_code)

    def describe_error(self, error):
        if not error.details:
            return error.message
        lines = [error.message] + [f"  {path}: {message}" for path, message in error.details.items()]
        return '\n'.join(lines)

    def run_command(self, **options):
        raise NotImplementedError

    def report(self, message):
        self.stdout.write(self.style.SUCCESS(message))

    def describe_corpus(self, corpus, location):
        n = {name: len(corpus.split(name)) for name in ('train', 'val', 'test')}
        self.report(
            f"Corpus at {location}: {n['train']} train / {n['val']} val / {n['test']} test sequences, "
            f"{len(corpus.vocab)} behaviors"
        )
