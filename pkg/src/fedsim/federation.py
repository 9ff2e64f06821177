"""Round-based federated training orchestrator.

One round: sample N of K clients, dispatch training assignments to a worker
pool, collect per-client results, weight and fold the resulting parameter
displacements (pseudo-gradients) into a single update, apply the stateful
server optimizer, optionally run a rehearsal pass over held-out data, then
evaluate on the validation set.

Two optimization levels: clients run stateless SGD from the current global
parameters (no optimizer state survives a round, because the starting model
changes every round); the server owns persistent optimizer state and takes
exactly one step per round on the aggregated pseudo-gradient.

Reproducibility: every random stream is derived from the master seed plus a
purpose tag (and, for clients, the round index and client id), so results in
deterministic mode do not depend on worker count or completion order.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .data import Dataset
from .nn import Architecture, Batch, backward, cross_entropy, forward, from_params
from .optim import AdamConfig, AdamState, SgdConfig, adam_step, sgd_step

# Purpose tags for deriving independent random streams from one master seed.
STREAM_DATA = 1
STREAM_SPLIT = 2
STREAM_PARTITION = 3
STREAM_NOISE = 4
STREAM_MODEL = 5
STREAM_SERVER = 6
STREAM_CLIENT = 7
STREAM_AGENT = 8
STREAM_STRATEGY = 9

_SEED_MASK = (1 << 64) - 1


def stream_rng(seed: int, *tags: int) -> np.random.Generator:
    """Generator for one named stream of the given master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed & _SEED_MASK, *tags]))


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    """Per-assignment generator: mixes master seed, round, and client id."""
    return stream_rng(seed, STREAM_CLIENT, round_index, client_id)


class ClientSkipped(Exception):
    """The client had no data to train on."""


class ClientDiverged(Exception):
    """Local training produced a non-finite loss or gradient."""


class RoundError(RuntimeError):
    """The round could not produce a global update (e.g. every client failed)."""


@dataclass(frozen=True)
class RehearsalConfig:
    """Server-side SGD pass over held-out data after each global update."""

    steps: int = 1
    batch_size: int = 32
    learning_rate: float = 1e-3

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")


@dataclass(frozen=True)
class FederationConfig:
    total_clients: int
    sampled_clients: int
    max_rounds: int = 100
    client_steps: int = 5
    client_batch_size: int = 32
    client_optimizer: SgdConfig = SgdConfig(learning_rate=0.05)
    server_optimizer: SgdConfig | AdamConfig = AdamConfig()
    rehearsal: RehearsalConfig | None = None
    workers: int = 1
    size_weighted: bool = False
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.total_clients < 1:
            raise ValueError(f"total_clients must be >= 1, got {self.total_clients}")
        if not 1 <= self.sampled_clients <= self.total_clients:
            raise ValueError(
                f"sampled_clients ({self.sampled_clients}) must be in "
                f"[1, total_clients={self.total_clients}]"
            )
        if self.max_rounds < 0:
            raise ValueError(f"max_rounds must be >= 0, got {self.max_rounds}")
        if self.client_steps < 1:
            raise ValueError(f"client_steps must be >= 1, got {self.client_steps}")
        if self.client_batch_size < 1:
            raise ValueError(f"client_batch_size must be >= 1, got {self.client_batch_size}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass
class ClientResult:
    """Privacy-insensitive round output of one client.

    This is the only message type that crosses the worker -> server boundary;
    raw examples never do.
    """

    client_id: int
    final_params: np.ndarray
    train_loss: float
    grad_mag_mean: float
    grad_mag_var: float
    examples_seen: int


@dataclass
class ServerState:
    """Global model plus persistent server-optimizer state.

    `opt_state` is an AdamState for an Adam server, a velocity vector (or
    None) for an SGD server. The generator is owned by the single server
    loop; candidate updates share it by reference and never draw from it.
    """

    round: int
    params: np.ndarray
    opt_state: AdamState | np.ndarray | None
    rng: np.random.Generator


@dataclass
class RoundMetrics:
    round: int
    clients: list[int]
    weights: list[float]
    client_losses: list[float | None]
    val_loss: float
    val_acc: float
    weight_entropy: float
    wall_ms: int
    failed: list[int] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        obj = {
            "round": self.round,
            "clients": self.clients,
            "weights": self.weights,
            "client_losses": self.client_losses,
            "val_loss": self.val_loss,
            "val_acc": self.val_acc,
            "weight_entropy": self.weight_entropy,
            "wall_ms": self.wall_ms,
        }
        if self.failed:
            obj["failed"] = self.failed
        return obj


@dataclass
class RoundContext:
    """Everything a weighting strategy needs to turn client results into a
    server update. `results` and `pseudo_grads` are in sampled-slot order,
    with None marking failed clients; `fold_positions` fixes the aggregation
    order (sorted by client id in deterministic mode, arrival order otherwise).
    """

    round_index: int
    state: ServerState
    server_cfg: SgdConfig | AdamConfig
    arch: Architecture
    client_ids: list[int]
    client_sizes: list[int]
    results: list[ClientResult | None]
    pseudo_grads: list[np.ndarray | None]
    fold_positions: list[int]
    validation: Dataset
    size_weighted: bool = False


@dataclass
class StrategyOutcome:
    state: ServerState
    weights: np.ndarray


class WeightingStrategy(Protocol):
    name: str

    def apply(self, ctx: RoundContext) -> StrategyOutcome: ...


# ---------------------------------------------------------------------------
# round building blocks
# ---------------------------------------------------------------------------


def sample_clients(total: int, sampled: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `sampled` distinct client ids uniformly from [0, total).

    Clients return to the pool after the round, so ids repeat across rounds.
    """
    if not 1 <= sampled <= total:
        raise ValueError(f"cannot sample {sampled} distinct clients from {total}")
    return rng.choice(total, size=sampled, replace=False)


def draw_batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Mini-batch indices without replacement; the whole set if it is smaller."""
    if batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


def client_train(
    client_id: int,
    seed_params: np.ndarray,
    dataset: Dataset,
    arch: Architecture,
    optimizer: SgdConfig,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
) -> ClientResult:
    """Run `steps` local SGD steps from the seed parameters.

    Records the mean per-step training loss and the mean/variance of the
    per-step gradient L2 norms (population variance, so a single step has
    variance 0). Raises ClientSkipped on an empty dataset and ClientDiverged
    if any loss or gradient goes non-finite.
    """
    if dataset is None or len(dataset) == 0:
        raise ClientSkipped(f"client {client_id} has no data")
    params = np.asarray(seed_params, dtype=np.float64)
    velocity = None
    losses: list[float] = []
    grad_norms: list[float] = []
    seen = 0
    for _ in range(steps):
        idx = draw_batch_indices(rng, len(dataset), batch_size)
        batch = Batch(dataset.features[idx], dataset.labels[idx])
        try:
            loss, grad = backward(from_params(arch, params), batch)
        except FloatingPointError as exc:
            raise ClientDiverged(f"client {client_id}: {exc}") from None
        if not np.isfinite(loss):
            raise ClientDiverged(f"client {client_id}: non-finite loss")
        losses.append(loss)
        grad_norms.append(float(np.linalg.norm(grad)))
        seen += len(idx)
        params, velocity = sgd_step(params, grad, optimizer, velocity)
    norms = np.asarray(grad_norms)
    return ClientResult(
        client_id=int(client_id),
        final_params=params,
        train_loss=float(np.mean(losses)),
        grad_mag_mean=float(norms.mean()),
        grad_mag_var=float(norms.var()),
        examples_seen=seen,
    )


def pseudo_gradient(seed_params: np.ndarray, final_params: np.ndarray) -> np.ndarray:
    """Client displacement as a descent direction: seed minus final parameters.

    A single local SGD step therefore yields exactly lr * gradient, and a
    unit-rate server SGD step over uniformly weighted displacements
    reproduces plain parameter averaging.
    """
    seed_params = np.asarray(seed_params, dtype=np.float64)
    final_params = np.asarray(final_params, dtype=np.float64)
    if seed_params.shape != final_params.shape:
        raise ValueError(
            f"parameter length mismatch: {seed_params.shape} vs {final_params.shape}"
        )
    return seed_params - final_params


def aggregate_streaming(pairs) -> np.ndarray:
    """Fold (weight, gradient) pairs into one running weighted sum.

    Single accumulator, so memory stays constant in the number of clients.
    Weights are expected to be already normalized.
    """
    acc: np.ndarray | None = None
    for weight, grad in pairs:
        w = float(weight)
        if not np.isfinite(w):
            raise FloatingPointError(f"non-finite aggregation weight {weight}")
        grad = np.asarray(grad, dtype=np.float64)
        if acc is None:
            acc = w * grad
        else:
            if grad.shape != acc.shape:
                raise ValueError(
                    f"gradient length mismatch: {grad.shape} vs {acc.shape}"
                )
            acc += w * grad
    if acc is None:
        raise ValueError("empty aggregation stream")
    return acc


def make_server_state(
    params: np.ndarray,
    server_cfg: SgdConfig | AdamConfig,
    rng: np.random.Generator,
) -> ServerState:
    params = np.asarray(params, dtype=np.float64).copy()
    opt = AdamState.zeros(params.size) if isinstance(server_cfg, AdamConfig) else None
    return ServerState(round=0, params=params, opt_state=opt, rng=rng)


def server_update(
    state: ServerState, agg_grad: np.ndarray, cfg: SgdConfig | AdamConfig
) -> ServerState:
    """One global-optimizer step on the aggregated pseudo-gradient.

    Pure: returns a fresh state with the round advanced; the input state is
    untouched, which is what lets candidate updates be evaluated side by side.
    """
    agg_grad = np.asarray(agg_grad, dtype=np.float64)
    if agg_grad.shape != state.params.shape:
        raise ValueError(
            f"aggregated gradient shape {agg_grad.shape} != params {state.params.shape}"
        )
    if isinstance(cfg, AdamConfig):
        opt = state.opt_state if isinstance(state.opt_state, AdamState) else AdamState.zeros(state.params.size)
        params, new_opt = adam_step(state.params, agg_grad, opt, cfg)
    else:
        params, new_opt = sgd_step(state.params, agg_grad, cfg, state.opt_state)
    return ServerState(round=state.round + 1, params=params, opt_state=new_opt, rng=state.rng)


def rehearsal_step(
    state: ServerState,
    heldout: Dataset,
    cfg: RehearsalConfig,
    arch: Architecture,
) -> ServerState:
    """Plain SGD over held-out mini-batches, applied after the global update.

    Keeps the global model anchored to data the server trusts. Uses the
    server's own generator for batch draws; the server optimizer state is
    not involved. steps=0 returns the state object unchanged.
    """
    if cfg.steps == 0:
        return state
    if heldout is None or len(heldout) == 0:
        raise ValueError("rehearsal is enabled but the held-out set is empty")
    params = state.params
    for _ in range(cfg.steps):
        idx = draw_batch_indices(state.rng, len(heldout), cfg.batch_size)
        batch = Batch(heldout.features[idx], heldout.labels[idx])
        _, grad = backward(from_params(arch, params), batch)
        params = params - cfg.learning_rate * grad
    return ServerState(round=state.round, params=params, opt_state=state.opt_state, rng=state.rng)


def evaluate_model(
    params: np.ndarray, arch: Architecture, dataset: Dataset
) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) of the given parameters on a dataset."""
    logits = forward(from_params(arch, params), dataset.features)
    loss = cross_entropy(logits, dataset.labels)
    acc = float((logits.argmax(axis=1) == dataset.labels).mean())
    return loss, acc


def classification_error(params: np.ndarray, arch: Architecture, dataset: Dataset) -> float:
    """Validation error rate in [0, 1]; the convergence currency of this simulator."""
    _, acc = evaluate_model(params, arch, dataset)
    return 1.0 - acc


def weight_entropy(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=np.float64)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


def apply_weighted_update(ctx: RoundContext, weights: np.ndarray) -> ServerState:
    """Aggregate surviving pseudo-gradients under `weights` and take one server step.

    Folding follows ctx.fold_positions so the result is independent of worker
    completion order in deterministic mode. Pure with respect to ctx.state.
    """
    pairs = ((weights[p], ctx.pseudo_grads[p]) for p in ctx.fold_positions)
    agg = aggregate_streaming(pairs)
    return server_update(ctx.state, agg, ctx.server_cfg)


# ---------------------------------------------------------------------------
# worker pool
# ---------------------------------------------------------------------------


class WorkerPool:
    """Fixed pool of in-process workers executing training assignments.

    Stands in for remote worker processes: the server hands each idle worker
    one assignment and gets back a ClientResult (or a failure signal). With
    one worker, assignments run inline in dispatch order.
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self._executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run(self, tasks: list[Callable[[], ClientResult]]):
        """Returns (results by dispatch slot, slot arrival order).

        Failure signals (ClientSkipped / ClientDiverged) are captured per
        slot; any other exception propagates.
        """
        results: list[ClientResult | Exception | None] = [None] * len(tasks)
        arrival: list[int] = []
        if self._executor is None:
            for i, task in enumerate(tasks):
                try:
                    results[i] = task()
                except (ClientSkipped, ClientDiverged) as exc:
                    results[i] = exc
                arrival.append(i)
        else:
            futures = {self._executor.submit(task): i for i, task in enumerate(tasks)}
            for future in as_completed(futures):
                i = futures[future]
                try:
                    results[i] = future.result()
                except (ClientSkipped, ClientDiverged) as exc:
                    results[i] = exc
                arrival.append(i)
        return results, arrival

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# round loop
# ---------------------------------------------------------------------------


def run_round(
    state: ServerState,
    cfg: FederationConfig,
    arch: Architecture,
    client_datasets: list[Dataset],
    validation: Dataset,
    strategy: WeightingStrategy,
    pool: WorkerPool,
    rehearsal_data: Dataset | None = None,
) -> tuple[ServerState, RoundMetrics]:
    """One full server round; returns the advanced state and its metrics."""
    t0 = time.perf_counter()
    round_index = state.round + 1
    ids = sample_clients(cfg.total_clients, cfg.sampled_clients, state.rng)
    seed_params = state.params

    def make_task(cid: int):
        def task() -> ClientResult:
            rng = client_rng(cfg.seed, round_index, cid)
            return client_train(
                cid,
                seed_params,
                client_datasets[cid],
                arch,
                cfg.client_optimizer,
                cfg.client_steps,
                cfg.client_batch_size,
                rng,
            )

        return task

    raw, arrival = pool.run([make_task(int(cid)) for cid in ids])
    results = [r if isinstance(r, ClientResult) else None for r in raw]
    failed = sorted(int(ids[i]) for i, r in enumerate(results) if r is None)
    if all(r is None for r in results):
        raise RoundError(f"round {round_index}: all {len(ids)} sampled clients failed")

    pseudo = [
        pseudo_gradient(seed_params, r.final_params) if r is not None else None
        for r in results
    ]
    survivors = [i for i, r in enumerate(results) if r is not None]
    if cfg.deterministic:
        fold_positions = sorted(survivors, key=lambda i: int(ids[i]))
    else:
        fold_positions = [i for i in arrival if results[i] is not None]

    ctx = RoundContext(
        round_index=round_index,
        state=state,
        server_cfg=cfg.server_optimizer,
        arch=arch,
        client_ids=[int(c) for c in ids],
        client_sizes=[len(client_datasets[int(c)]) for c in ids],
        results=results,
        pseudo_grads=pseudo,
        fold_positions=fold_positions,
        validation=validation,
        size_weighted=cfg.size_weighted,
    )
    outcome = strategy.apply(ctx)
    new_state = outcome.state
    if new_state.round != round_index:
        raise RoundError(
            f"strategy advanced the server {new_state.round - state.round} steps; expected 1"
        )
    if cfg.rehearsal is not None:
        new_state = rehearsal_step(new_state, rehearsal_data, cfg.rehearsal, arch)

    val_loss, val_acc = evaluate_model(new_state.params, arch, validation)
    elapsed_ms = 0 if cfg.deterministic else int(round((time.perf_counter() - t0) * 1000))
    metrics = RoundMetrics(
        round=round_index,
        clients=[int(c) for c in ids],
        weights=[float(w) for w in outcome.weights],
        client_losses=[r.train_loss if r is not None else None for r in results],
        val_loss=val_loss,
        val_acc=val_acc,
        weight_entropy=weight_entropy(outcome.weights),
        wall_ms=elapsed_ms,
        failed=failed,
    )
    return new_state, metrics


def target_reached(metrics: RoundMetrics, metric: str | None, target: float | None) -> bool:
    if metric is None or target is None:
        return False
    if metric == "val_acc":
        return metrics.val_acc >= target
    if metric == "val_loss":
        return metrics.val_loss <= target
    raise ValueError(f"unknown target metric {metric!r}")


def run_training(
    cfg: FederationConfig,
    arch: Architecture,
    init_params: np.ndarray,
    client_datasets: list[Dataset],
    validation: Dataset,
    strategy: WeightingStrategy,
    rehearsal_data: Dataset | None = None,
    target_metric: str | None = None,
    target_value: float | None = None,
    on_round: Callable[[RoundMetrics], None] | None = None,
) -> tuple[list[RoundMetrics], ServerState]:
    """Iterate rounds until max_rounds or the early-stop target is reached.

    Returns the full round history and the final server state. max_rounds=0
    yields an empty history with the model untouched.
    """
    if len(client_datasets) != cfg.total_clients:
        raise ValueError(
            f"got {len(client_datasets)} client datasets for total_clients={cfg.total_clients}"
        )
    if validation is None or len(validation) == 0:
        raise ValueError("validation set must be non-empty")
    if cfg.rehearsal is not None and cfg.rehearsal.steps > 0:
        if rehearsal_data is None or len(rehearsal_data) == 0:
            raise ValueError("rehearsal is enabled but no held-out data was provided")
    if target_metric is not None and target_metric not in ("val_acc", "val_loss"):
        raise ValueError(f"unknown target metric {target_metric!r}")

    state = make_server_state(init_params, cfg.server_optimizer, stream_rng(cfg.seed, STREAM_SERVER))
    history: list[RoundMetrics] = []
    with WorkerPool(cfg.workers) as pool:
        for _ in range(cfg.max_rounds):
            state, metrics = run_round(
                state, cfg, arch, client_datasets, validation, strategy, pool, rehearsal_data
            )
            history.append(metrics)
            if on_round is not None:
                on_round(metrics)
            if target_reached(metrics, target_metric, target_value):
                break
    return history, state
