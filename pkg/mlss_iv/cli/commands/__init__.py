from .base import Command, EXIT_INPUT_ERROR, EXIT_OK, EXIT_WEAK_IDENTIFICATION
from .estimate_commands import ARCommand, EstimateCommand
from .simulate_commands import SimulateCommand

__all__ = [
    "Command",
    "EstimateCommand",
    "ARCommand",
    "SimulateCommand",
    "EXIT_OK",
    "EXIT_INPUT_ERROR",
    "EXIT_WEAK_IDENTIFICATION",
]
