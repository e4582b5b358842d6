import logging
import sys
from typing import List, Optional

from mlss_iv import __version__
from mlss_iv.cli.commands import (
    EXIT_INPUT_ERROR,
    EXIT_OK,
    ARCommand,
    Command,
    EstimateCommand,
    SimulateCommand,
)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class CLIClient:
    """Dispatches a command line to the matching command"""

    def __init__(self):
        self.commands: List[Command] = [
            EstimateCommand(),
            ARCommand(),
            SimulateCommand(),
        ]

        # Create command lookup map
        self.command_map = {cmd.name: cmd for cmd in self.commands}

    def print_help(self):
        """Print available commands"""
        print(f"\n=== mlss-iv {__version__} ===")
        print("Usage: mlss-iv [--verbose] <command> [flags]")
        print("Commands:")

        for cmd in self.commands:
            print(f"  {cmd.name:<10} - {cmd.description}")

        print("  help       - Show this help, or `help <command>` for its flags")
        print("\nNotes:")
        print("  • CSV columns: y, d_* (treatments), w_* (excluded instruments), x_* (covariates)")
        print("  • MLSS_THREADS caps the number of parallel workers")
        print("  • Exit codes: 0 success, 1 input/config error, 2 weak identification")

    def execute(self, argv: List[str]) -> int:
        """Execute a command line (without the program name) and return the exit code"""
        if not argv:
            self.print_help()
            return EXIT_INPUT_ERROR

        cmd_name = argv[0].lower()
        args = argv[1:]

        if cmd_name in ['help', '-h', '--help']:
            if args and args[0] in self.command_map:
                print(self.command_map[args[0]].help_text)
            else:
                self.print_help()
            return EXIT_OK

        if cmd_name in self.command_map:
            return self.command_map[cmd_name].execute(args)

        print(f"Unknown command: {cmd_name}", file=sys.stderr)
        print("Type 'mlss-iv help' for available commands", file=sys.stderr)
        return EXIT_INPUT_ERROR


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    verbose = False
    while argv and argv[0] in ('-v', '--verbose'):
        verbose = True
        argv.pop(0)
    configure_logging(verbose)
    return CLIClient().execute(argv)


if __name__ == "__main__":
    sys.exit(main())
