from pathlib import Path

from runs.services import PipelineRunner, RunDirectory
from ingest.records import Corpus
from ._base import RMSLCommand


class Command(RMSLCommand):
    help = 'Run training stages (1, 2, 3, 12 or 123), optionally resuming from a checkpoint'

    def add_arguments(self, parser):
        self.add_config_argument(parser, required=True)
        parser.add_argument('--stage', help='Stage plan; defaults to run.stages')
        parser.add_argument('--resume', help='Checkpoint to continue from')
        parser.add_argument('--corpus', help='Existing corpus directory')
        parser.add_argument('--out', help='Run directory; a new one is created under RMSL_RUN_DIR otherwise')

    def run_command(self, **options):
        overrides = {}
        if options['stage']:
            overrides['run.stages'] = options['stage']
        config = self.load_config(options, **overrides)
        runner = PipelineRunner(config, command='train')
        directory = RunDirectory(options['out']) if options['out'] else runner.new_directory()
        corpus = Corpus.load(options['corpus']) if options['corpus'] else None
        resume = Path(options['resume']) if options['resume'] else None
        outcome = runner.run(directory=directory, resume=resume, corpus=corpus, evaluate=False)
        for label, path in sorted(directory.checkpoints().items()):
            self.stdout.write(f"  stage {label}: {path}")
        self.report(f"Training finished (stages '{outcome.training.completed}') in {directory.path}")
