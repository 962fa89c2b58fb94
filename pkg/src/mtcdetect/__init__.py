"""Sporadic device activity detection: simulator, covariance ML baseline and
heterogeneous-transformer detector with training and evaluation tools."""

from .covariance import detect_cd, nll, threshold
from .errors import (ContractError, DimensionError, FormatError, MTCError, NumericError, ParameterError,
                     StateError, TrainingAborted, UndefinedMetricError)
from .evaluation import bench_time, operating_point, pm_pf, roc_sweep, RocCurve
from .signal import SimulationSetup, draw_sample, generate_batch, generate_scenario, sample_covariance
from .training import TrainConfig, train, weighted_bce_loss
from .transformer import HTConfig, HTParams, forward, predict

__version__ = "0.1.0"
