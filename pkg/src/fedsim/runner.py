"""Turn a validated RunConfig into an executed experiment on disk.

A run directory contains:

* ``config.json``           the fully resolved configuration
* ``metrics.jsonl``         one JSON object per round (the authoritative log)
* ``checkpoint.json``       final global model + server optimizer state
* ``agent_checkpoint.json`` policy network state (learned weighting only)
* ``summary.json``          derived numbers, all recomputable from the JSONL

In deterministic mode per-round wall_ms is recorded as 0 so that two runs of
the same config + seed produce byte-identical metrics files.
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import federation as fed
from . import weighting
from .nn import Architecture, init_model, to_params
from .optim import AdamConfig, AdamState, SgdConfig
from .report import rounds_to_target


class RunDirectoryExists(RuntimeError):
    """Refusing to overwrite an existing run without force."""


@dataclasses.dataclass
class ExperimentSetup:
    arch: Architecture
    init_params: np.ndarray
    client_datasets: list[datamod.Dataset]
    validation: datamod.Dataset
    rehearsal: datamod.Dataset | None
    noisy_clients: list[int]
    federation: fed.FederationConfig
    strategy: object


def load_source(cfg: cfgmod.RunConfig) -> datamod.Dataset:
    source = cfg.data.source
    seed = cfg.federation.seed
    if isinstance(source, cfgmod.SyntheticSource):
        return datamod.generate_synthetic(
            classes=source.classes,
            dims=source.dims,
            examples=source.examples,
            cluster_spread=source.cluster_spread,
            rng=fed.stream_rng(seed, fed.STREAM_DATA),
            groups=source.groups,
        )
    return datamod.load_dataset(source.path, source.kind, source.labels_path)


def build_experiment(cfg: cfgmod.RunConfig) -> ExperimentSetup:
    """Materialize data, model, strategy, and the final federation config."""
    seed = cfg.federation.seed
    source = load_source(cfg)
    n_classes = source.n_classes
    if n_classes < 2:
        raise cfgmod.ConfigError("source dataset must contain at least 2 classes")

    train_idx, val_idx, reh_idx = datamod.split_indices(
        len(source),
        cfg.data.validation_fraction,
        cfg.data.rehearsal_fraction,
        fed.stream_rng(seed, fed.STREAM_SPLIT),
    )
    train = source.take(train_idx)
    validation = source.take(val_idx)
    rehearsal = source.take(reh_idx) if len(reh_idx) else None

    parts = datamod.partition(
        train, cfg.data.partition, fed.stream_rng(seed, fed.STREAM_PARTITION)
    )
    noisy_ids: list[int] = []
    if cfg.data.noise is not None:
        parts, noisy_ids = datamod.inject_label_noise(
            parts, cfg.data.noise, fed.stream_rng(seed, fed.STREAM_NOISE), n_classes
        )

    total = len(parts)
    if cfg.federation.sampled_clients > total:
        raise cfgmod.ConfigError(
            f"federation.sampled_clients ({cfg.federation.sampled_clients}) exceeds "
            f"the partition's client count ({total})"
        )
    fed_cfg = dataclasses.replace(cfg.federation, total_clients=total)

    arch = Architecture(
        (train.n_features, *cfg.model.hidden, n_classes), cfg.model.activation
    )
    init = to_params(init_model(arch, fed.stream_rng(seed, fed.STREAM_MODEL)))

    strat = cfg.strategy
    if strat.kind == "rl":
        strategy = weighting.LearnedWeighting(
            n_sampled=fed_cfg.sampled_clients,
            rng=fed.stream_rng(seed, fed.STREAM_AGENT),
            beta=strat.beta,
            reward_policy=weighting.RewardPolicy(strat.reward_threshold, strat.base_reward),
            optimizer=AdamConfig(learning_rate=strat.agent_learning_rate),
            exploration=strat.exploration,
            replay_capacity=strat.replay_capacity,
            replay_batch=strat.replay_batch,
        )
    else:
        strategy = weighting.build_strategy(strat.kind, beta=strat.beta)

    return ExperimentSetup(
        arch=arch,
        init_params=init,
        client_datasets=parts,
        validation=validation,
        rehearsal=rehearsal,
        noisy_clients=noisy_ids,
        federation=fed_cfg,
        strategy=strategy,
    )


def metrics_json_line(metrics: fed.RoundMetrics) -> str:
    return json.dumps(metrics.to_json_obj(), separators=(",", ":"))


def _optimizer_checkpoint(state: fed.ServerState, server_cfg) -> dict:
    if isinstance(server_cfg, AdamConfig):
        opt = state.opt_state
        return {
            "kind": "adam",
            "m": opt.m.tolist(),
            "v": opt.v.tolist(),
            "t": opt.t,
        }
    velocity = state.opt_state
    return {
        "kind": "sgd",
        "velocity": velocity.tolist() if velocity is not None else None,
    }


def write_checkpoint(path: Path, state: fed.ServerState, arch: Architecture, cfg: fed.FederationConfig) -> None:
    obj = {
        "format_version": 1,
        "round": state.round,
        "architecture": {"layer_dims": list(arch.layer_dims), "activation": arch.activation},
        "params": state.params.tolist(),
        "server_optimizer": _optimizer_checkpoint(state, cfg.server_optimizer),
        "seed": cfg.seed,
    }
    path.write_text(json.dumps(obj))


def load_checkpoint(path: Path) -> tuple[Architecture, np.ndarray, dict]:
    obj = json.loads(Path(path).read_text())
    if obj.get("format_version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {obj.get('format_version')}")
    arch = Architecture(tuple(obj["architecture"]["layer_dims"]), obj["architecture"]["activation"])
    return arch, np.asarray(obj["params"], dtype=np.float64), obj


def write_agent_checkpoint(path: Path, strategy: weighting.LearnedWeighting) -> None:
    obj = {
        "format_version": 1,
        "architecture": {
            "layer_dims": list(strategy.agent.arch.layer_dims),
            "activation": strategy.agent.arch.activation,
        },
        "params": to_params(strategy.agent).tolist(),
        "optimizer": {
            "kind": "adam",
            "m": strategy.opt_state.m.tolist(),
            "v": strategy.opt_state.v.tolist(),
            "t": strategy.opt_state.t,
        },
    }
    path.write_text(json.dumps(obj))


def execute_run(
    cfg: cfgmod.RunConfig,
    out_dir: str | Path,
    force: bool = False,
) -> dict:
    """Run the experiment and write all artifacts; returns the summary dict."""
    out = Path(out_dir)
    if (out / "metrics.jsonl").exists() and not force:
        raise RunDirectoryExists(
            f"{out} already holds a completed run; pass force to overwrite"
        )
    out.mkdir(parents=True, exist_ok=True)

    setup = build_experiment(cfg)
    resolved = dataclasses.replace(cfg, federation=setup.federation)
    (out / "config.json").write_text(cfgmod.serialize(resolved))

    started = time.perf_counter()
    with (out / "metrics.jsonl").open("w") as sink:
        history, state = fed.run_training(
            setup.federation,
            setup.arch,
            setup.init_params,
            setup.client_datasets,
            setup.validation,
            setup.strategy,
            rehearsal_data=setup.rehearsal,
            target_metric=cfg.eval.metric if cfg.eval.target is not None else None,
            target_value=cfg.eval.target,
            on_round=lambda m: sink.write(metrics_json_line(m) + "\n"),
        )
    elapsed_s = time.perf_counter() - started

    write_checkpoint(out / "checkpoint.json", state, setup.arch, setup.federation)
    if isinstance(setup.strategy, weighting.LearnedWeighting):
        write_agent_checkpoint(out / "agent_checkpoint.json", setup.strategy)

    hit = (
        rounds_to_target(history, cfg.eval.metric, cfg.eval.target)
        if cfg.eval.target is not None
        else None
    )
    summary = {
        "label": resolved.display_label,
        "strategy": cfg.strategy.kind,
        "seed": setup.federation.seed,
        "deterministic": setup.federation.deterministic,
        "rounds_completed": len(history),
        "early_stopped": hit is not None and len(history) < setup.federation.max_rounds,
        "final_val_acc": history[-1].val_acc if history else None,
        "final_val_loss": history[-1].val_loss if history else None,
        "best_val_acc": max((m.val_acc for m in history), default=None),
        "target_metric": cfg.eval.metric,
        "target_value": cfg.eval.target,
        "rounds_to_target": hit,
        "wall_ms_total": sum(m.wall_ms for m in history),
        "wall_clock_s": None if setup.federation.deterministic else round(elapsed_s, 3),
        "noisy_clients": setup.noisy_clients,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def write_partition_manifest(cfg: cfgmod.RunConfig, manifest_path: str | Path) -> dict:
    """Write {client_id: [source example indices]} for audit and exact re-runs."""
    seed = cfg.federation.seed
    source = load_source(cfg)
    train_idx, _, _ = datamod.split_indices(
        len(source),
        cfg.data.validation_fraction,
        cfg.data.rehearsal_fraction,
        fed.stream_rng(seed, fed.STREAM_SPLIT),
    )
    train = source.take(train_idx)
    local_parts = datamod.partition_indices(
        train, cfg.data.partition, fed.stream_rng(seed, fed.STREAM_PARTITION)
    )
    manifest = {
        str(cid): train_idx[part].tolist() for cid, part in enumerate(local_parts)
    }
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest))
    return manifest
