import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import nn, weighting
from fedsim.federation import (
    ClientResult,
    RoundContext,
    make_server_state,
    stream_rng,
)
from fedsim.data import Dataset
from fedsim.optim import AdamConfig, AdamState, SgdConfig
from fedsim.weighting import (
    LearnedWeighting,
    ReplayMemory,
    RewardPolicy,
    SoftmaxWeighting,
    Transition,
    UniformWeighting,
    agent_update,
    build_observation,
    compute_reward,
    evaluate_candidates,
    make_agent,
    rl_infer_weights,
    softmax_weights,
    uniform_weights,
)

finite_losses = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False), min_size=1, max_size=20
)


def _result(cid, loss, gm=0.0, gv=0.0, params=None):
    return ClientResult(
        client_id=cid,
        final_params=params if params is not None else np.zeros(3),
        train_loss=loss,
        grad_mag_mean=gm,
        grad_mag_var=gv,
        examples_seen=10,
    )


class TestUniform:
    def test_quarter_weights(self):
        assert np.array_equal(uniform_weights(4), [0.25, 0.25, 0.25, 0.25])

    def test_single_client(self):
        assert np.array_equal(uniform_weights(1), [1.0])

    def test_entropy_is_log_n(self):
        w = uniform_weights(8)
        assert -(w * np.log(w)).sum() == pytest.approx(math.log(8), abs=1e-12)

    def test_zero_clients_rejected(self):
        with pytest.raises(ValueError):
            uniform_weights(0)


class TestSoftmaxWeights:
    def test_equal_losses_give_uniform(self):
        w = softmax_weights([2.5, 2.5, 2.5], beta=7.0)
        assert np.allclose(w, 1 / 3, atol=1e-15)

    def test_beta_zero_is_uniform_regardless_of_losses(self):
        w = softmax_weights([0.1, 5.0, 100.0], beta=0.0)
        assert np.allclose(w, 1 / 3, atol=1e-15)

    def test_closed_form_two_losses(self):
        w = softmax_weights([0.0, math.log(2)], beta=1.0)
        assert w == pytest.approx([2 / 3, 1 / 3], abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax_weights([], beta=1.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            softmax_weights([1.0, np.inf], beta=1.0)

    @given(losses=finite_losses, beta=st.floats(min_value=0, max_value=20))
    @settings(max_examples=80, deadline=None)
    def test_simplex(self, losses, beta):
        w = softmax_weights(losses, beta)
        assert abs(w.sum() - 1.0) < 1e-12
        assert (w >= 0).all()

    @given(losses=finite_losses, beta=st.floats(min_value=0, max_value=20), shift=st.floats(min_value=-30, max_value=30))
    @settings(max_examples=60, deadline=None)
    def test_translation_invariance(self, losses, beta, shift):
        a = softmax_weights(losses, beta)
        b = softmax_weights(np.asarray(losses) + shift, beta)
        assert np.allclose(a, b, atol=1e-9)

    def test_anti_monotone_in_losses(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            losses = rng.uniform(0, 5, size=6)
            w = softmax_weights(losses, beta=rng.uniform(0.5, 10))
            order = np.argsort(losses)
            assert (np.diff(w[order]) <= 1e-15).all()

    def test_large_beta_concentrates_on_argmin(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            losses = rng.uniform(0, 3, size=10)
            w = softmax_weights(losses, beta=1e3)
            assert w[np.argmin(losses)] > 0.99


class TestObservation:
    def test_identical_clients_standardize_to_zero(self):
        results = [_result(0, 1.0, 0.5, 0.2), _result(1, 1.0, 0.5, 0.2)]
        assert np.array_equal(build_observation(results), np.zeros(6))

    def test_slot_layout(self):
        results = [_result(3, 1.0, 10.0, 0.0), _result(9, 3.0, 20.0, 0.0)]
        obs = build_observation(results)
        assert obs.shape == (6,)
        # slot 0 holds the first sampled client's triple
        assert obs[0] == -1.0 and obs[3] == 1.0  # losses 1,3 -> -1,+1
        assert obs[1] == -1.0 and obs[4] == 1.0  # means 10,20 -> -1,+1
        assert obs[2] == 0.0 and obs[5] == 0.0  # constant variance -> 0

    def test_population_std_convention(self):
        results = [_result(0, 1.0), _result(1, 3.0)]
        obs = build_observation(results)
        assert obs[0] == pytest.approx(-1.0, abs=1e-12)
        assert obs[3] == pytest.approx(1.0, abs=1e-12)

    def test_failed_clients_imputed_with_round_max_loss(self):
        results = [_result(0, 1.0, 2.0, 1.0), None, _result(2, 3.0, 4.0, 3.0)]
        obs = build_observation(results)
        assert obs.shape == (9,)
        # the imputed slot carries the worst loss, so it matches slot 2's loss
        assert obs[3] == obs[6]
        assert obs[4] == obs.reshape(3, 3)[:, 1].min()  # zero grad mean is smallest


class TestAgent:
    def test_architecture_shape(self):
        arch = weighting.agent_architecture(10)
        assert arch.layer_dims == (30, 20, 10, 8, 10)
        assert arch.activation == "relu"
        arch = weighting.agent_architecture(100)
        assert arch.layer_dims == (300, 200, 100, 25, 100)

    def test_fresh_agent_outputs_uniform(self):
        agent = make_agent(6, np.random.default_rng(0))
        w = rl_infer_weights(agent, np.random.default_rng(1).normal(size=18))
        assert np.allclose(w, 1 / 6, atol=1e-15)

    def test_weights_strictly_positive_simplex(self):
        rng = np.random.default_rng(2)
        agent = make_agent(5, rng)
        agent, _ = agent_update(
            agent,
            [Transition(rng.normal(size=15), uniform_weights(5), 1.0)],
            AdamState.zeros(agent.arch.param_count()),
            AdamConfig(),
        )
        w = rl_infer_weights(agent, rng.normal(size=15))
        assert abs(w.sum() - 1.0) < 1e-12
        assert (w > 0).all()

    def test_inference_reproducible(self):
        agent = make_agent(4, np.random.default_rng(3))
        obs = np.random.default_rng(4).normal(size=12)
        assert np.array_equal(rl_infer_weights(agent, obs), rl_infer_weights(agent, obs))

    def test_wrong_observation_length(self):
        agent = make_agent(4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            rl_infer_weights(agent, np.zeros(13))


class TestReward:
    def test_policy_clearly_better(self):
        assert compute_reward(0.10, 0.20, RewardPolicy(0.01, 1.0)) == ("a", 1.0)

    def test_policy_clearly_worse(self):
        assert compute_reward(0.20, 0.10, RewardPolicy(0.01, 1.0)) == ("b", -1.0)

    def test_similar_gets_small_positive(self):
        chosen, r = compute_reward(0.105, 0.10, RewardPolicy(0.01, 1.0))
        assert chosen == "a"
        assert r == pytest.approx(0.1)

    def test_scaled_base_reward(self):
        assert compute_reward(0.0, 0.5, RewardPolicy(0.01, 2.0)) == ("a", 2.0)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            compute_reward(1.5, 0.5, RewardPolicy())


class TestReplay:
    def _t(self, i):
        return Transition(np.array([float(i)]), np.array([1.0]), 0.0)

    def test_capacity_and_fifo_eviction(self):
        mem = ReplayMemory(capacity=1000)
        for i in range(1001):
            mem.push(self._t(i))
        assert len(mem) == 1000
        stored = [t.observation[0] for t in mem]
        assert stored[0] == 1.0  # the very first transition was evicted
        assert stored == sorted(stored)  # FIFO order preserved

    def test_push_to_empty(self):
        mem = ReplayMemory()
        mem.push(self._t(0))
        assert len(mem) == 1

    def test_sample_with_replacement_when_small(self):
        mem = ReplayMemory()
        mem.push(self._t(7))
        batch = mem.sample(np.random.default_rng(0), size=32)
        assert len(batch) == 32
        assert all(t.observation[0] == 7.0 for t in batch)

    def test_sample_without_replacement_when_full_enough(self):
        mem = ReplayMemory()
        for i in range(1000):
            mem.push(self._t(i))
        batch = mem.sample(np.random.default_rng(1), size=32)
        assert len({t.observation[0] for t in batch}) == 32

    def test_sample_reproducible(self):
        mem = ReplayMemory()
        for i in range(100):
            mem.push(self._t(i))
        a = [t.observation[0] for t in mem.sample(np.random.default_rng(5), 32)]
        b = [t.observation[0] for t in mem.sample(np.random.default_rng(5), 32)]
        assert a == b

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ReplayMemory().sample(np.random.default_rng(0))


class TestAgentUpdate:
    def test_zero_reward_batch_changes_nothing_from_fresh_state(self):
        rng = np.random.default_rng(0)
        agent = make_agent(3, rng)
        before = nn.to_params(agent)
        batch = [Transition(rng.normal(size=9), uniform_weights(3), 0.0) for _ in range(4)]
        updated, _ = agent_update(agent, batch, AdamState.zeros(before.size), AdamConfig())
        assert np.array_equal(nn.to_params(updated), before)

    def test_positive_reward_pulls_policy_toward_action(self):
        rng = np.random.default_rng(1)
        agent = make_agent(3, rng)
        state = AdamState.zeros(agent.arch.param_count())
        obs = rng.normal(size=9)
        action = np.array([0.7, 0.2, 0.1])
        kls = []
        for _ in range(200):
            pi = rl_infer_weights(agent, obs)
            kls.append(float((action * np.log(action / pi)).sum()))
            agent, state = agent_update(
                agent, [Transition(obs, action, 1.0)], state, AdamConfig(learning_rate=0.01)
            )
        assert kls[-1] < kls[0]
        assert kls[-1] < 0.05

    def test_update_is_pure(self):
        rng = np.random.default_rng(2)
        agent = make_agent(3, rng)
        before = nn.to_params(agent).copy()
        state = AdamState.zeros(before.size)
        agent_update(agent, [Transition(rng.normal(size=9), uniform_weights(3), 1.0)], state, AdamConfig())
        assert np.array_equal(nn.to_params(agent), before)
        assert state.t == 0

    def test_empty_minibatch_rejected(self):
        agent = make_agent(2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            agent_update(agent, [], AdamState.zeros(agent.arch.param_count()), AdamConfig())


def _make_ctx(n=3, server_cfg=None, seed=0):
    """A tiny synthetic round: fixed pseudo-gradients and a 2-class validation set."""
    rng = np.random.default_rng(seed)
    arch = nn.Architecture((2, 2))
    params = nn.to_params(nn.init_model(arch, rng))
    server_cfg = server_cfg if server_cfg is not None else SgdConfig(learning_rate=1.0)
    state = make_server_state(params, server_cfg, stream_rng(seed, 1))
    validation = Dataset(rng.normal(size=(40, 2)), rng.integers(0, 2, size=40))
    results = [
        _result(i, float(rng.uniform(0.5, 2.0)), params=params - rng.normal(size=params.size) * 0.1)
        for i in range(n)
    ]
    pseudo = [params - r.final_params for r in results]
    return RoundContext(
        round_index=1,
        state=state,
        server_cfg=server_cfg,
        arch=arch,
        client_ids=list(range(n)),
        client_sizes=[10] * n,
        results=results,
        pseudo_grads=pseudo,
        fold_positions=list(range(n)),
        validation=validation,
    )


class TestEvaluateCandidates:
    def test_identical_weights_give_identical_errors(self):
        ctx = _make_ctx()
        w = uniform_weights(3)
        pair = evaluate_candidates(ctx, w, w)
        assert pair.err_a == pair.err_b
        assert np.array_equal(pair.state_a.params, pair.state_b.params)

    def test_single_client_forces_equal_candidates(self):
        ctx = _make_ctx(n=1)
        pair = evaluate_candidates(ctx, np.array([1.0]), np.array([1.0]))
        assert pair.err_a == pair.err_b

    def test_zero_update_keeps_pre_round_error(self):
        ctx = _make_ctx()
        ctx.pseudo_grads = [np.zeros_like(g) for g in ctx.pseudo_grads]
        from fedsim.federation import classification_error

        before = classification_error(ctx.state.params, ctx.arch, ctx.validation)
        pair = evaluate_candidates(ctx, uniform_weights(3), uniform_weights(3))
        assert pair.err_a == before

    def test_live_state_not_advanced(self):
        ctx = _make_ctx()
        evaluate_candidates(ctx, uniform_weights(3), uniform_weights(3))
        assert ctx.state.round == 0


class TestStrategies:
    def test_uniform_apply_weights(self):
        ctx = _make_ctx()
        outcome = UniformWeighting().apply(ctx)
        assert np.allclose(outcome.weights, 1 / 3)
        assert outcome.state.round == 1

    def test_softmax_apply_prefers_low_loss(self):
        ctx = _make_ctx()
        outcome = SoftmaxWeighting(beta=5.0).apply(ctx)
        losses = [r.train_loss for r in ctx.results]
        assert np.argmax(outcome.weights) == np.argmin(losses)
        assert abs(sum(outcome.weights) - 1.0) < 1e-12

    def test_failed_slots_get_zero_weight(self):
        ctx = _make_ctx()
        ctx.results[1] = None
        ctx.pseudo_grads[1] = None
        ctx.fold_positions = [0, 2]
        outcome = UniformWeighting().apply(ctx)
        assert outcome.weights[1] == 0.0
        assert outcome.weights[0] == pytest.approx(0.5)
        assert abs(outcome.weights.sum() - 1.0) < 1e-12

    def test_size_weighted_pre_scaling(self):
        ctx = _make_ctx()
        ctx.size_weighted = True
        ctx.client_sizes = [10, 30, 10]
        outcome = UniformWeighting().apply(ctx)
        assert outcome.weights == pytest.approx([0.2, 0.6, 0.2])

    def test_learned_adopts_exactly_one_candidate(self):
        ctx = _make_ctx(seed=3)
        strat = LearnedWeighting(3, np.random.default_rng(5))
        outcome = strat.apply(ctx)
        decision = strat.last_decision
        expected = decision.params_a if decision.chosen == "a" else decision.params_b
        assert np.array_equal(outcome.state.params, expected)
        assert len(strat.replay) == 1
        assert decision.reward in (1.0, -1.0, pytest.approx(0.1))

    def test_learned_uses_stated_replay_defaults(self):
        strat = LearnedWeighting(4, np.random.default_rng(0))
        assert strat.replay.capacity == 1000
        assert strat.replay_batch == 32

    def test_build_strategy_ids(self):
        assert isinstance(weighting.build_strategy("uniform"), UniformWeighting)
        assert weighting.build_strategy("softmax", beta=2.0).beta == 2.0
        with pytest.raises(ValueError):
            weighting.build_strategy("magic")
