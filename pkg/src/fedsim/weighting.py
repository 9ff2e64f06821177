"""Aggregation-weight strategies for the server round.

Three ways to weight client pseudo-gradients before they are folded into the
global update:

* uniform        every surviving client counts the same
* softmax        exp(-beta * train_loss), normalized; high-loss clients are
                 de-emphasized, beta=0 recovers uniform
* learned        a small policy network maps per-client training statistics
                 to weights and is trained online: each round the policy's
                 weights compete against the softmax weights, the candidate
                 global models are scored on validation error, and the win /
                 tie / loss outcome becomes a reward stored in a replay
                 buffer that drives the policy update

All strategies return weights on the probability simplex, with zeros at
failed-client slots.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import nn
from .federation import (
    ClientResult,
    RoundContext,
    ServerState,
    StrategyOutcome,
    apply_weighted_update,
    classification_error,
)
from .optim import AdamConfig, AdamState, adam_step


def uniform_weights(n: int) -> np.ndarray:
    if n < 1:
        raise ValueError(f"need at least one client, got {n}")
    return np.full(n, 1.0 / n)


def softmax_weights(losses, beta: float) -> np.ndarray:
    """exp(-beta * loss), normalized with max-subtraction stabilization.

    Anti-monotone in the losses for beta > 0 and invariant to shifting all
    losses by a constant; beta = 0 is exactly uniform.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty loss vector")
    if not np.isfinite(losses).all():
        raise ValueError("losses must be finite")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    z = -beta * losses
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def _slot_weights(ctx: RoundContext, survivor_weights: np.ndarray) -> np.ndarray:
    """Spread survivor weights into sampled-slot order, zero at failed slots,
    optionally pre-scaled by client dataset size, and renormalized."""
    weights = np.zeros(len(ctx.results))
    survivors = [i for i, r in enumerate(ctx.results) if r is not None]
    weights[survivors] = survivor_weights
    if ctx.size_weighted:
        sizes = np.asarray(ctx.client_sizes, dtype=np.float64)
        weights = weights * sizes
    total = weights.sum()
    if total <= 0 or not np.isfinite(total):
        raise ValueError("aggregation weights sum to zero")
    return weights / total


class UniformWeighting:
    """Plain averaging over the surviving clients."""

    name = "uniform"

    def round_weights(self, ctx: RoundContext) -> np.ndarray:
        survivors = sum(1 for r in ctx.results if r is not None)
        return _slot_weights(ctx, uniform_weights(survivors))

    def apply(self, ctx: RoundContext) -> StrategyOutcome:
        weights = self.round_weights(ctx)
        return StrategyOutcome(apply_weighted_update(ctx, weights), weights)


class SoftmaxWeighting:
    """Loss-based weighting: clients reporting higher training loss count less."""

    name = "softmax"

    def __init__(self, beta: float = 5.0):
        if beta < 0:
            raise ValueError(f"beta must be >= 0, got {beta}")
        self.beta = float(beta)

    def round_weights(self, ctx: RoundContext) -> np.ndarray:
        losses = [r.train_loss for r in ctx.results if r is not None]
        return _slot_weights(ctx, softmax_weights(losses, self.beta))

    def apply(self, ctx: RoundContext) -> StrategyOutcome:
        weights = self.round_weights(ctx)
        return StrategyOutcome(apply_weighted_update(ctx, weights), weights)


# ---------------------------------------------------------------------------
# learned weighting
# ---------------------------------------------------------------------------


def build_observation(results: list[ClientResult | None]) -> np.ndarray:
    """Flatten per-client (train_loss, grad_mag_mean, grad_mag_var) triples.

    Slot j of the sampled list owns entries [3j, 3j+3). Each feature is
    standardized across the round's clients (population std; constant
    features map to 0) so the policy input is scale-stable across tasks.
    Failed clients are imputed with the round-max loss and zero grad stats.
    """
    if not results:
        raise ValueError("no client results")
    survivor_losses = [r.train_loss for r in results if r is not None]
    if not survivor_losses:
        raise ValueError("every client failed; no observation to build")
    worst = max(survivor_losses)
    feats = np.array(
        [
            (r.train_loss, r.grad_mag_mean, r.grad_mag_var)
            if r is not None
            else (worst, 0.0, 0.0)
            for r in results
        ]
    )
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std[std == 0] = 1.0
    standardized = (feats - mean) / std
    # re-zero exactly-constant features (mean subtraction already gives 0.0)
    return standardized.ravel()


def agent_architecture(n_clients: int) -> nn.Architecture:
    """Policy network layout: 3N inputs, N outputs, narrow 2nd-to-last layer."""
    n = int(n_clients)
    if n < 1:
        raise ValueError(f"need at least one client, got {n}")
    bottleneck = max(8, n // 4)
    return nn.Architecture((3 * n, 2 * n, n, bottleneck, n), activation="relu")


def make_agent(n_clients: int, rng: np.random.Generator) -> nn.MLPModel:
    """Fresh policy network; the zeroed output layer makes the cold-start
    action exactly uniform."""
    return nn.init_model(agent_architecture(n_clients), rng, zero_output_layer=True)


def rl_infer_weights(agent: nn.MLPModel, observation: np.ndarray) -> np.ndarray:
    """Deterministic policy action: softmax over the network's outputs."""
    obs = np.asarray(observation, dtype=np.float64)
    if obs.shape != (agent.arch.input_dim,):
        raise ValueError(
            f"observation has shape {obs.shape}, expected ({agent.arch.input_dim},)"
        )
    logits = nn.forward(agent, obs[None, :])
    if not np.isfinite(logits).all():
        raise FloatingPointError("non-finite policy output")
    return nn.softmax(logits)[0]


@dataclass(frozen=True)
class RewardPolicy:
    """Win / tie / loss reward for the policy-vs-softmax candidate duel.

    threshold is the error-rate difference below which the two candidates
    count as similar; base_reward scales the +1 / -1 / +0.1 outcomes.
    """

    threshold: float = 0.001
    base_reward: float = 1.0

    def __post_init__(self) -> None:
        if self.threshold < 0:
            raise ValueError(f"threshold must be >= 0, got {self.threshold}")
        if self.base_reward <= 0:
            raise ValueError(f"base_reward must be > 0, got {self.base_reward}")


def compute_reward(
    err_policy: float, err_softmax: float, policy: RewardPolicy
) -> tuple[str, float]:
    """Pick which candidate to adopt and the reward for the policy's action.

    Policy clearly better -> adopt it, full reward. Similar -> adopt the
    policy's candidate with a small positive reward. Clearly worse -> fall
    back to the softmax candidate, negative reward.
    """
    for err in (err_policy, err_softmax):
        if not 0.0 <= err <= 1.0:
            raise ValueError(f"error rates must be in [0, 1], got {err}")
    if err_softmax - err_policy > policy.threshold:
        return "a", policy.base_reward
    if abs(err_policy - err_softmax) <= policy.threshold:
        return "a", 0.1 * policy.base_reward
    return "b", -policy.base_reward


@dataclass
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float


class ReplayMemory:
    """FIFO buffer of past transitions; sampling breaks the correlation
    between consecutive rounds during policy updates."""

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._buffer: deque[Transition] = deque(maxlen=capacity)

    def push(self, transition: Transition) -> None:
        self._buffer.append(transition)

    def sample(self, rng: np.random.Generator, size: int = 32) -> list[Transition]:
        """`size` uniform draws: with replacement while the buffer is still
        smaller than the batch, without replacement once it is full enough."""
        if len(self._buffer) == 0:
            raise ValueError("replay memory is empty")
        replace = len(self._buffer) < size
        idx = rng.choice(len(self._buffer), size=size, replace=replace)
        return [self._buffer[i] for i in idx]

    def __len__(self) -> int:
        return len(self._buffer)

    def __iter__(self):
        return iter(self._buffer)


def agent_update(
    agent: nn.MLPModel,
    minibatch: list[Transition],
    opt_state: AdamState,
    opt_cfg: AdamConfig,
) -> tuple[nn.MLPModel, AdamState]:
    """One Adam step on the reward-weighted action regression.

    Per transition the objective is -reward * sum_j action_j * log pi_j(obs),
    so positive rewards pull the policy toward the stored action distribution
    and negative rewards push it away. Returns a new agent; inputs untouched.
    """
    if not minibatch:
        raise ValueError("empty minibatch")
    obs = np.stack([t.observation for t in minibatch])
    actions = np.stack([t.action for t in minibatch])
    rewards = np.array([t.reward for t in minibatch])[:, None]
    logits = nn.forward(agent, obs)
    probs = nn.softmax(logits)
    # d/dlogits of the mean objective; actions live on the simplex
    dlogits = rewards * (probs - actions) / len(minibatch)
    grad = nn.backprop_logits(agent, obs, dlogits)
    params = nn.to_params(agent)
    new_params, new_state = adam_step(params, grad, opt_state, opt_cfg)
    return nn.from_params(agent.arch, new_params), new_state


@dataclass
class CandidatePair:
    state_a: ServerState
    state_b: ServerState
    err_a: float
    err_b: float


def evaluate_candidates(
    ctx: RoundContext, weights_a: np.ndarray, weights_b: np.ndarray
) -> CandidatePair:
    """Build both candidate global models and score them on validation error.

    Each candidate is one ordinary server update under its weight vector; the
    live server state is never advanced here, so adopting a candidate later
    is exactly one optimizer step for the round.
    """
    state_a = apply_weighted_update(ctx, weights_a)
    state_b = apply_weighted_update(ctx, weights_b)
    err_a = classification_error(state_a.params, ctx.arch, ctx.validation)
    err_b = classification_error(state_b.params, ctx.arch, ctx.validation)
    return CandidatePair(state_a, state_b, err_a, err_b)


@dataclass
class RoundDecision:
    """Audit record of one learned-weighting round (kept for tests/debugging)."""

    chosen: str
    reward: float
    err_a: float
    err_b: float
    params_a: np.ndarray
    params_b: np.ndarray


class LearnedWeighting:
    """Policy-network weighting trained online against the softmax baseline.

    During training rounds the action is drawn from softmax(logits + noise)
    rather than the deterministic policy output: the zero-initialized policy
    is a stationary point of the reward-weighted regression (the gradient is
    reward * (pi - action), which vanishes when the action equals pi), so a
    little exploration noise is what gets learning off the ground.
    """

    name = "rl"

    def __init__(
        self,
        n_sampled: int,
        rng: np.random.Generator,
        beta: float = 5.0,
        reward_policy: RewardPolicy | None = None,
        agent: nn.MLPModel | None = None,
        optimizer: AdamConfig | None = None,
        exploration: float = 0.3,
        replay_capacity: int = 1000,
        replay_batch: int = 32,
    ):
        if exploration < 0:
            raise ValueError(f"exploration must be >= 0, got {exploration}")
        self.n_sampled = int(n_sampled)
        self.beta = float(beta)
        self.reward_policy = reward_policy or RewardPolicy()
        self.agent = agent if agent is not None else make_agent(n_sampled, rng)
        self.optimizer = optimizer or AdamConfig()
        self.opt_state = AdamState.zeros(self.agent.arch.param_count())
        self.exploration = float(exploration)
        self.replay = ReplayMemory(replay_capacity)
        self.replay_batch = int(replay_batch)
        self.rng = rng
        self.last_decision: RoundDecision | None = None

    def explore_weights(self, observation: np.ndarray) -> np.ndarray:
        """Training-time action: softmax of the policy logits plus Gaussian noise."""
        obs = np.asarray(observation, dtype=np.float64)
        logits = nn.forward(self.agent, obs[None, :])[0]
        if self.exploration > 0:
            logits = logits + self.exploration * self.rng.normal(size=logits.shape)
        shifted = logits - logits.max()
        w = np.exp(shifted)
        return w / w.sum()

    def apply(self, ctx: RoundContext) -> StrategyOutcome:
        observation = build_observation(ctx.results)
        action = self.explore_weights(observation)
        weights_a = _slot_weights(
            ctx, action[[i for i, r in enumerate(ctx.results) if r is not None]]
        )
        losses = [r.train_loss for r in ctx.results if r is not None]
        weights_b = _slot_weights(ctx, softmax_weights(losses, self.beta))

        pair = evaluate_candidates(ctx, weights_a, weights_b)
        chosen, reward = compute_reward(pair.err_a, pair.err_b, self.reward_policy)

        self.replay.push(Transition(observation, action, reward))
        minibatch = self.replay.sample(self.rng, self.replay_batch)
        self.agent, self.opt_state = agent_update(
            self.agent, minibatch, self.opt_state, self.optimizer
        )

        self.last_decision = RoundDecision(
            chosen=chosen,
            reward=reward,
            err_a=pair.err_a,
            err_b=pair.err_b,
            params_a=pair.state_a.params,
            params_b=pair.state_b.params,
        )
        if chosen == "a":
            return StrategyOutcome(pair.state_a, weights_a)
        return StrategyOutcome(pair.state_b, weights_b)


def build_strategy(kind: str, **kwargs):
    """Construct a strategy by id; the ids double as config values."""
    if kind == "uniform":
        return UniformWeighting()
    if kind == "softmax":
        return SoftmaxWeighting(beta=kwargs.get("beta", 5.0))
    if kind == "rl":
        return LearnedWeighting(**kwargs)
    raise ValueError(f"unknown weighting strategy {kind!r}")
