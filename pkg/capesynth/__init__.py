"""
capesynth: federated differentially private synthetic data with correlated noise
"""
from .accountant import AccountingReport, NoiseScales, PrivacyParams, calibrate_tau, total_epsilon
from .data_io import Dataset, SyntheticDataset, SyntheticRecord
from .errors import CapeSynthError
from .evaluation import EvalReport, evaluate_accuracy, sweep, train_softmax
from .federation import Mode, RunConfig, run_pipeline

__all__ = ['AccountingReport', 'NoiseScales', 'PrivacyParams', 'calibrate_tau', 'total_epsilon',
           'Dataset', 'SyntheticDataset', 'SyntheticRecord', 'CapeSynthError',
           'EvalReport', 'evaluate_accuracy', 'sweep', 'train_softmax',
           'Mode', 'RunConfig', 'run_pipeline']
