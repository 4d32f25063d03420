"""Federated transfer learning for EEG classification on SPD covariance manifolds."""
from .data import EegTrial, FoldAssignment, TrialSet, load_trials, make_folds, save_trials, synth_generate
from .errors import FtlError
from .layers import ModelParams, init_params, network_backward, network_forward
from .spd import covariance, frechet_mean, geodesic_distance, log_map, spd_exp, spd_log, sym_eig

__version__ = "0.1.0"
