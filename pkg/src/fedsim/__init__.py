"""Round-based federated learning simulator.

A single server samples N of K clients per round, clients run stateless
local SGD, and the server folds the weighted parameter displacements into a
stateful global optimizer step. Aggregation weights come from one of three
strategies: uniform, softmax over training losses, or a learned policy
trained online from validation-error rewards.
"""

from .config import ConfigError, RunConfig, parse_config, serialize
from .data import Dataset, NoiseSpec, PartitionSpec, generate_synthetic, partition
from .federation import (
    ClientResult,
    FederationConfig,
    RehearsalConfig,
    RoundMetrics,
    ServerState,
    WorkerPool,
    aggregate_streaming,
    client_train,
    pseudo_gradient,
    run_round,
    run_training,
    sample_clients,
    server_update,
)
from .nn import (
    Architecture,
    Batch,
    MLPModel,
    backward,
    cross_entropy,
    finite_diff_grad,
    forward,
    from_params,
    init_model,
    to_params,
)
from .optim import AdamConfig, AdamState, SgdConfig, adam_step, sgd_step
from .report import compare, rounds_to_target
from .weighting import (
    LearnedWeighting,
    ReplayMemory,
    RewardPolicy,
    SoftmaxWeighting,
    Transition,
    UniformWeighting,
    build_observation,
    compute_reward,
    softmax_weights,
    uniform_weights,
)

__version__ = "0.1.0"

__all__ = [
    "AdamConfig",
    "AdamState",
    "Architecture",
    "Batch",
    "ClientResult",
    "ConfigError",
    "Dataset",
    "FederationConfig",
    "LearnedWeighting",
    "MLPModel",
    "NoiseSpec",
    "PartitionSpec",
    "RehearsalConfig",
    "ReplayMemory",
    "RewardPolicy",
    "RoundMetrics",
    "RunConfig",
    "ServerState",
    "SgdConfig",
    "SoftmaxWeighting",
    "Transition",
    "UniformWeighting",
    "WorkerPool",
    "adam_step",
    "aggregate_streaming",
    "backward",
    "build_observation",
    "client_train",
    "compare",
    "compute_reward",
    "cross_entropy",
    "finite_diff_grad",
    "forward",
    "from_params",
    "generate_synthetic",
    "init_model",
    "parse_config",
    "partition",
    "pseudo_gradient",
    "rounds_to_target",
    "run_round",
    "run_training",
    "sample_clients",
    "serialize",
    "server_update",
    "sgd_step",
    "softmax_weights",
    "to_params",
    "uniform_weights",
]
