"""
Command-line entry point: estimate, ar and simulate
"""

from .cli_client import CLIClient, main

__all__ = ['CLIClient', 'main']
