"""
Machine-learning split-sample instrumental-variable estimation.
Cross-fitted optimal instruments, robust inference and a Monte Carlo harness.
"""

__version__ = "0.1.0"
__author__ = "MLSS-IV Team"
