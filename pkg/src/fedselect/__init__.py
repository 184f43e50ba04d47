"""Deterministic federated learning simulator with keyed model slicing.

Clients pick select keys, receive only the matching slices of a large
server model, train locally, and the server scatters their keyed updates
back with a deselection average.
"""

from .config import ExperimentConfig, parse_config
from .delivery import DeliveryMode, account_summary, deliver
from .exceptions import *  # noqa: F401,F403
from .experiment import build_data, build_model, build_parts, run_experiment
from .fedcore import (
    CommLedger,
    FederatedValue,
    Placement,
    aggregate_mean,
    aggregate_mean_deselect,
    broadcast,
    clients,
    fed_select,
    server,
)
from .models import MLP, SparseLogReg, SparseMLP
from .reporting import MetricsRow, emit_metrics_csv
from .training import ServerOptimizer, run_round_baseline, run_round_select, sample_cohort

__version__ = "0.1.0"
