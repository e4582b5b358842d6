"""
Utility functions
"""

from .file_utils import create_sample_dataset
from .seeding import derive_seed

__all__ = ['create_sample_dataset', 'derive_seed']
