"""
Core components for split-sample IV estimation
"""

from .data_model import Dataset, DesignPair, FoldAssignment, design_matrices, load_csv, make_folds, write_csv
from .estimator import EstimateResult, FStat, first_stage_F, hausman_test, mlss_estimate, subvector_tau, tsls
from .instruments import CovariateMode, InstrumentMatrix, WeightingScheme, generate_instrument
from .report_formatter import ReportFormatter
from .weak_iv import ARFoldInput, ARSet, ar_set_combined, ar_set_fold, ar_statistic, wald_ci

__all__ = [
    'Dataset', 'DesignPair', 'FoldAssignment', 'design_matrices', 'load_csv', 'make_folds', 'write_csv',
    'InstrumentMatrix', 'WeightingScheme', 'CovariateMode', 'generate_instrument',
    'EstimateResult', 'FStat', 'mlss_estimate', 'subvector_tau', 'tsls', 'first_stage_F', 'hausman_test',
    'ARFoldInput', 'ARSet', 'ar_statistic', 'ar_set_fold', 'ar_set_combined', 'wald_ci',
    'ReportFormatter',
]
