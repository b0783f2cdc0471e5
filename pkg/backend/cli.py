#!/usr/bin/env python
"""
`rmsl` launcher: `rmsl syngen-e2e --seed 7` runs the `syngen_e2e`
management command with the project settings.
"""
import os
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

SUBCOMMANDS = ('ingest', 'syngen', 'train', 'evaluate', 'plot', 'ablate', 'syngen-e2e', 'run', 'sweep')


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'rmsl.settings')
    if not argv or argv[0] in ('-h', '--help'):
        print(f"usage: rmsl {{{','.join(SUBCOMMANDS)}}} [options]")
        return 0
    if argv[0] not in SUBCOMMANDS:
        print(f"rmsl: unknown subcommand '{argv[0]}'", file=sys.stderr)
        return 2

    from django.core.management import execute_from_command_line

    execute_from_command_line(['rmsl', argv[0].replace('-', '_')] + argv[1:])
    return 0


if __name__ == '__main__':
    sys.exit(main())
