import argparse
import sys
from abc import ABC, abstractmethod
from typing import List, Optional

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_WEAK_IDENTIFICATION = 2


class Command(ABC):
    """A `mlss-iv` subcommand: an argparse parser plus an execute step returning an exit code"""

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @property
    @abstractmethod
    def description(self) -> str:
        pass

    @abstractmethod
    def get_parser(self) -> argparse.ArgumentParser:
        pass

    @property
    def help_text(self) -> str:
        """Full flag listing for `mlss-iv help <command>`"""
        return self.get_parser().format_help()

    def parse_args(self, args: List[str]) -> Optional[argparse.Namespace]:
        """Parsed flags, or None after argparse has reported the problem on stderr."""
        try:
            return self.get_parser().parse_args(args)
        except SystemExit:
            print(f"Run 'mlss-iv help {self.name}' for the list of flags", file=sys.stderr)
            return None

    @abstractmethod
    def execute(self, args: List[str]) -> int:
        pass
