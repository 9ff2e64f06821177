"""Run configuration: one JSON document describing data, model, federation,
weighting strategy, and evaluation target.

Parsing fills documented defaults, rejects unknown keys, and validates
cross-field consistency (for example the sampled-client count against the
partition's client count). `serialize` is the exact inverse of `parse_config`
up to formatting.

Minimal document::

    {
      "data": {"source": {"kind": "synthetic"},
               "partition": {"kind": "iid", "clients": 8}},
      "federation": {"sampled_clients": 4}
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import NoiseSpec, PartitionSpec
from .federation import FederationConfig, RehearsalConfig
from .optim import AdamConfig, SgdConfig


class ConfigError(ValueError):
    """A syntactically valid document with invalid or inconsistent content."""


@dataclass(frozen=True)
class SyntheticSource:
    kind: str = "synthetic"
    classes: int = 10
    dims: int = 20
    examples: int = 4000
    cluster_spread: float = 1.0
    groups: int | None = None


@dataclass(frozen=True)
class FileSource:
    kind: str  # "csv" | "idx"
    path: str
    labels_path: str | None = None


@dataclass(frozen=True)
class DataConfig:
    source: SyntheticSource | FileSource
    partition: PartitionSpec
    noise: NoiseSpec | None = None
    validation_fraction: float = 0.1
    rehearsal_fraction: float = 0.1


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "uniform"
    beta: float = 5.0
    reward_threshold: float = 0.001
    base_reward: float = 1.0
    agent_learning_rate: float = 1e-3
    exploration: float = 0.3
    replay_capacity: int = 1000
    replay_batch: int = 32


@dataclass(frozen=True)
class EvalConfig:
    metric: str = "val_acc"
    target: float | None = None


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    federation: FederationConfig
    model: ModelConfig = ModelConfig()
    strategy: StrategyConfig = StrategyConfig()
    eval: EvalConfig = EvalConfig()
    label: str | None = None
    output_dir: str | None = None

    @property
    def display_label(self) -> str:
        return self.label if self.label else self.strategy.kind


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return obj[key]


def _parse_source(obj: dict) -> SyntheticSource | FileSource:
    kind = _require(obj, "kind", "data.source")
    if kind == "synthetic":
        _check_keys(
            obj,
            {"kind", "classes", "dims", "examples", "cluster_spread", "groups"},
            "data.source",
        )
        return SyntheticSource(
            classes=int(obj.get("classes", 10)),
            dims=int(obj.get("dims", 20)),
            examples=int(obj.get("examples", 4000)),
            cluster_spread=float(obj.get("cluster_spread", 1.0)),
            groups=int(obj["groups"]) if obj.get("groups") is not None else None,
        )
    if kind in ("csv", "idx"):
        _check_keys(obj, {"kind", "path", "labels_path"}, "data.source")
        return FileSource(
            kind=kind,
            path=str(_require(obj, "path", "data.source")),
            labels_path=str(obj["labels_path"]) if obj.get("labels_path") else None,
        )
    raise ConfigError(f"data.source.kind: unknown source kind {kind!r}")


def _parse_partition(obj: dict) -> PartitionSpec:
    _check_keys(obj, {"kind", "clients", "concentration"}, "data.partition")
    kind = _require(obj, "kind", "data.partition")
    try:
        return PartitionSpec(
            kind=kind,
            clients=int(obj["clients"]) if obj.get("clients") is not None else None,
            concentration=float(obj["concentration"])
            if obj.get("concentration") is not None
            else None,
        )
    except ValueError as exc:
        raise ConfigError(f"data.partition: {exc}") from None


def _parse_data(obj: dict) -> DataConfig:
    _check_keys(
        obj,
        {"source", "partition", "noise", "validation_fraction", "rehearsal_fraction"},
        "data",
    )
    noise = None
    if obj.get("noise") is not None:
        nobj = obj["noise"]
        _check_keys(nobj, {"noisy_client_fraction", "label_flip_prob"}, "data.noise")
        try:
            noise = NoiseSpec(
                noisy_client_fraction=float(nobj.get("noisy_client_fraction", 0.0)),
                label_flip_prob=float(nobj.get("label_flip_prob", 0.0)),
            )
        except ValueError as exc:
            raise ConfigError(f"data.noise: {exc}") from None
    return DataConfig(
        source=_parse_source(_require(obj, "source", "data")),
        partition=_parse_partition(_require(obj, "partition", "data")),
        noise=noise,
        validation_fraction=float(obj.get("validation_fraction", 0.1)),
        rehearsal_fraction=float(obj.get("rehearsal_fraction", 0.1)),
    )


def _parse_sgd(obj: dict, where: str) -> SgdConfig:
    _check_keys(obj, {"kind", "learning_rate", "momentum"}, where)
    try:
        return SgdConfig(
            learning_rate=float(obj.get("learning_rate", 0.05)),
            momentum=float(obj.get("momentum", 0.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_server_optimizer(obj: dict) -> SgdConfig | AdamConfig:
    where = "federation.server_optimizer"
    kind = obj.get("kind", "adam")
    if kind == "sgd":
        return _parse_sgd(obj, where)
    if kind == "adam":
        _check_keys(obj, {"kind", "learning_rate", "beta1", "beta2", "eps"}, where)
        try:
            return AdamConfig(
                learning_rate=float(obj.get("learning_rate", 1e-3)),
                beta1=float(obj.get("beta1", 0.9)),
                beta2=float(obj.get("beta2", 0.999)),
                eps=float(obj.get("eps", 1e-8)),
            )
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}.kind: unknown optimizer {kind!r}")


def _parse_federation(obj: dict, partition: PartitionSpec) -> FederationConfig:
    _check_keys(
        obj,
        {
            "sampled_clients",
            "max_rounds",
            "client_steps",
            "client_batch_size",
            "client_optimizer",
            "server_optimizer",
            "rehearsal",
            "workers",
            "size_weighted",
            "seed",
            "deterministic",
        },
        "federation",
    )
    sampled = int(_require(obj, "sampled_clients", "federation"))
    # for grouped partitions the client count is only known once data is built;
    # use the sampled count as a placeholder lower bound
    total = partition.clients if partition.clients is not None else sampled
    if partition.clients is not None and sampled > partition.clients:
        raise ConfigError(
            f"federation.sampled_clients ({sampled}) exceeds "
            f"data.partition.clients ({partition.clients})"
        )
    rehearsal = None
    if obj.get("rehearsal") is not None:
        robj = obj["rehearsal"]
        _check_keys(robj, {"steps", "batch_size", "learning_rate"}, "federation.rehearsal")
        try:
            rehearsal = RehearsalConfig(
                steps=int(robj.get("steps", 1)),
                batch_size=int(robj.get("batch_size", 32)),
                learning_rate=float(robj.get("learning_rate", 1e-3)),
            )
        except ValueError as exc:
            raise ConfigError(f"federation.rehearsal: {exc}") from None
    try:
        return FederationConfig(
            total_clients=total,
            sampled_clients=sampled,
            max_rounds=int(obj.get("max_rounds", 100)),
            client_steps=int(obj.get("client_steps", 5)),
            client_batch_size=int(obj.get("client_batch_size", 32)),
            client_optimizer=_parse_sgd(
                obj.get("client_optimizer", {}), "federation.client_optimizer"
            ),
            server_optimizer=_parse_server_optimizer(obj.get("server_optimizer", {})),
            rehearsal=rehearsal,
            workers=int(obj.get("workers", 1)),
            size_weighted=bool(obj.get("size_weighted", False)),
            seed=int(obj.get("seed", 0)),
            deterministic=bool(obj.get("deterministic", True)),
        )
    except ValueError as exc:
        raise ConfigError(f"federation: {exc}") from None


def _parse_model(obj: dict) -> ModelConfig:
    _check_keys(obj, {"hidden", "activation"}, "model")
    hidden = tuple(int(h) for h in obj.get("hidden", (32,)))
    if any(h < 1 for h in hidden):
        raise ConfigError(f"model.hidden: layer widths must be >= 1, got {list(hidden)}")
    activation = str(obj.get("activation", "relu"))
    if activation not in ("relu", "tanh"):
        raise ConfigError(f"model.activation: unknown activation {activation!r}")
    return ModelConfig(hidden=hidden, activation=activation)


def _parse_strategy(obj: dict) -> StrategyConfig:
    _check_keys(
        obj,
        {
            "kind",
            "beta",
            "reward_threshold",
            "base_reward",
            "agent_learning_rate",
            "exploration",
            "replay_capacity",
            "replay_batch",
        },
        "strategy",
    )
    kind = str(obj.get("kind", "uniform"))
    if kind not in ("uniform", "softmax", "rl"):
        raise ConfigError(f"strategy.kind: unknown strategy {kind!r}")
    cfg = StrategyConfig(
        kind=kind,
        beta=float(obj.get("beta", 5.0)),
        reward_threshold=float(obj.get("reward_threshold", 0.001)),
        base_reward=float(obj.get("base_reward", 1.0)),
        agent_learning_rate=float(obj.get("agent_learning_rate", 1e-3)),
        exploration=float(obj.get("exploration", 0.3)),
        replay_capacity=int(obj.get("replay_capacity", 1000)),
        replay_batch=int(obj.get("replay_batch", 32)),
    )
    if cfg.beta < 0:
        raise ConfigError(f"strategy.beta: must be >= 0, got {cfg.beta}")
    return cfg


def _parse_eval(obj: dict) -> EvalConfig:
    _check_keys(obj, {"metric", "target"}, "eval")
    metric = str(obj.get("metric", "val_acc"))
    if metric not in ("val_acc", "val_loss"):
        raise ConfigError(f"eval.metric: unknown metric {metric!r}")
    target = float(obj["target"]) if obj.get("target") is not None else None
    return EvalConfig(metric=metric, target=target)


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a JSON run configuration."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(obj, dict):
        raise ConfigError("top-level config must be a JSON object")
    _check_keys(
        obj,
        {"data", "federation", "model", "strategy", "eval", "label", "output_dir"},
        "config",
    )
    data = _parse_data(_require(obj, "data", "config"))
    federation = _parse_federation(_require(obj, "federation", "config"), data.partition)
    return RunConfig(
        data=data,
        federation=federation,
        model=_parse_model(obj.get("model", {})),
        strategy=_parse_strategy(obj.get("strategy", {})),
        eval=_parse_eval(obj.get("eval", {})),
        label=str(obj["label"]) if obj.get("label") is not None else None,
        output_dir=str(obj["output_dir"]) if obj.get("output_dir") is not None else None,
    )


def serialize(cfg: RunConfig) -> str:
    """Render a config back to JSON; parse(serialize(cfg)) == cfg."""
    source = cfg.data.source
    if isinstance(source, SyntheticSource):
        source_obj = {
            "kind": "synthetic",
            "classes": source.classes,
            "dims": source.dims,
            "examples": source.examples,
            "cluster_spread": source.cluster_spread,
            "groups": source.groups,
        }
    else:
        source_obj = {"kind": source.kind, "path": source.path, "labels_path": source.labels_path}
    server = cfg.federation.server_optimizer
    if isinstance(server, AdamConfig):
        server_obj = {
            "kind": "adam",
            "learning_rate": server.learning_rate,
            "beta1": server.beta1,
            "beta2": server.beta2,
            "eps": server.eps,
        }
    else:
        server_obj = {
            "kind": "sgd",
            "learning_rate": server.learning_rate,
            "momentum": server.momentum,
        }
    obj = {
        "label": cfg.label,
        "data": {
            "source": source_obj,
            "partition": {
                "kind": cfg.data.partition.kind,
                "clients": cfg.data.partition.clients,
                "concentration": cfg.data.partition.concentration,
            },
            "noise": (
                {
                    "noisy_client_fraction": cfg.data.noise.noisy_client_fraction,
                    "label_flip_prob": cfg.data.noise.label_flip_prob,
                }
                if cfg.data.noise is not None
                else None
            ),
            "validation_fraction": cfg.data.validation_fraction,
            "rehearsal_fraction": cfg.data.rehearsal_fraction,
        },
        "model": {"hidden": list(cfg.model.hidden), "activation": cfg.model.activation},
        "federation": {
            "sampled_clients": cfg.federation.sampled_clients,
            "max_rounds": cfg.federation.max_rounds,
            "client_steps": cfg.federation.client_steps,
            "client_batch_size": cfg.federation.client_batch_size,
            "client_optimizer": {
                "learning_rate": cfg.federation.client_optimizer.learning_rate,
                "momentum": cfg.federation.client_optimizer.momentum,
            },
            "server_optimizer": server_obj,
            "rehearsal": (
                {
                    "steps": cfg.federation.rehearsal.steps,
                    "batch_size": cfg.federation.rehearsal.batch_size,
                    "learning_rate": cfg.federation.rehearsal.learning_rate,
                }
                if cfg.federation.rehearsal is not None
                else None
            ),
            "workers": cfg.federation.workers,
            "size_weighted": cfg.federation.size_weighted,
            "seed": cfg.federation.seed,
            "deterministic": cfg.federation.deterministic,
        },
        "strategy": {
            "kind": cfg.strategy.kind,
            "beta": cfg.strategy.beta,
            "reward_threshold": cfg.strategy.reward_threshold,
            "base_reward": cfg.strategy.base_reward,
            "agent_learning_rate": cfg.strategy.agent_learning_rate,
            "exploration": cfg.strategy.exploration,
            "replay_capacity": cfg.strategy.replay_capacity,
            "replay_batch": cfg.strategy.replay_batch,
        },
        "eval": {"metric": cfg.eval.metric, "target": cfg.eval.target},
        "output_dir": cfg.output_dir,
    }
    return json.dumps(obj, indent=2)
