"""Deterministic desk-scale federated learning simulation harness."""

from .core import ParamVector, Rng, axpy, dirichlet_sample, hash64, weighted_mean
from .data import Dataset, SyntheticSpec, allocate_local_test, generate_synthetic, load_idx
from .errors import (
    ConfigError,
    FedsimError,
    IncompatibleShape,
    InvalidArgument,
    NumericError,
    PartitionError,
)
from .federation import (
    ALGORITHMS,
    FederationConfig,
    RunResult,
    fine_tune,
    fuse_fedavg,
    fuse_fednova,
    run_federation,
    sample_clients,
)
from .metrics import (
    MetricReport,
    compute_report,
    fairness_metric,
    gfl_metric,
    newcomer_protocol,
    pfl_metric,
)
from .model import (
    LocalTrainSpec,
    ModelSpec,
    OptState,
    client_update,
    evaluate,
    forward_loss_grad,
    init_params,
    sgd_step,
)
from .partition import ClientPartition, PartitionSpec, make_partitions

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "ClientPartition",
    "ConfigError",
    "Dataset",
    "FederationConfig",
    "FedsimError",
    "IncompatibleShape",
    "InvalidArgument",
    "LocalTrainSpec",
    "MetricReport",
    "ModelSpec",
    "NumericError",
    "OptState",
    "ParamVector",
    "PartitionError",
    "PartitionSpec",
    "Rng",
    "RunResult",
    "SyntheticSpec",
    "allocate_local_test",
    "axpy",
    "client_update",
    "compute_report",
    "dirichlet_sample",
    "evaluate",
    "fairness_metric",
    "fine_tune",
    "forward_loss_grad",
    "fuse_fedavg",
    "fuse_fednova",
    "generate_synthetic",
    "gfl_metric",
    "hash64",
    "init_params",
    "load_idx",
    "make_partitions",
    "newcomer_protocol",
    "pfl_metric",
    "run_federation",
    "sample_clients",
    "sgd_step",
    "weighted_mean",
]
