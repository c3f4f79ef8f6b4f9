import argparse
import sys

from django.core.management.base import BaseCommand, CommandError

from nli_generator import cli


class Command(BaseCommand):
    help = "Generate, filter and evaluate NLI datasets (run `manage.py nligen --help` for subcommands)."

    def add_arguments(self, parser):
        parser.add_argument('args', nargs=argparse.REMAINDER, help="nligen subcommand and its options")

    def run_from_argv(self, argv):
        # argv is [prog, 'nligen', ...]; the subcommand parser owns everything after that
        sys.exit(cli.main(argv[2:]))

    def handle(self, *args, **options):
        code = cli.main(list(args))
        if code != cli.EXIT_OK:
            raise CommandError(f"nligen {' '.join(args[:1])} exited with status {code}", returncode=code)
