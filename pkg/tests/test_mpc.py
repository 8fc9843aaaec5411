import numpy as np
import pytest

from metampc.dynamics import DynamicsModel
from metampc.envs import ConditionSpec, FrictionCartEnv
from metampc.errors import ConfigError, PlanningError
from metampc.mpc import (
    EpisodeLog,
    MpcConfig,
    PlanDiagnostics,
    RewardSpec,
    discounted_return,
    plan,
    reward_velocity_tracking,
    run_episode,
    velocity_schedule,
)
from metampc.sampling import ActionHistory, ConstraintLimits


class IdentityDynamics:
    """1-D position stub: next state = state + action."""

    def predict_next_batch(self, states, actions, context=None):
        return states + actions


def brute_force_best(model, s0, candidates, gamma, reward, prev_action):
    """Straightforward per-sequence scoring loop, kept independent of plan()."""
    best_idx, best_ret = -1, -np.inf
    for i in range(candidates.shape[0]):
        s = np.array(s0, dtype=float)
        prev = np.array(prev_action, dtype=float)
        total = 0.0
        for t in range(candidates.shape[1]):
            a = candidates[i, t]
            s = s + a  # identity dynamics
            r = reward.evaluate(s, a, prev_a=prev)
            total += gamma**t * r
            prev = a
        if total > best_ret:
            best_idx, best_ret = i, total
    return best_idx, best_ret


def quad_reward():
    # -s^2 on the 1-D stub state
    return RewardSpec("velocity_tracking", {"v_des": 0.0, "w_vel": 1.0, "v_index": 0})


class TestDiscountedReturn:
    def test_geometric_example(self):
        assert discounted_return([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)

    def test_gamma_zero_keeps_first(self):
        assert discounted_return([3.0, 100.0, -5.0], 0.0) == 3.0

    def test_gamma_one_plain_sum(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=17)
        total = 0.0
        for v in r:
            total += v
        assert discounted_return(r, 1.0) == pytest.approx(total)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            discounted_return([], 0.9)


class TestRewardVelocityTracking:
    def params(self):
        return {"v_des": 0.5, "w_vel": 1.0, "w_act": 0.1, "v_index": 1}

    def test_perfect_tracking_is_zero(self):
        s = np.array([0.0, 0.5])
        a = np.array([0.3])
        assert reward_velocity_tracking(s, a, self.params(), prev_a=a) == 0.0

    def test_monotone_in_velocity_error(self):
        p = self.params()
        a = np.array([0.0])
        errs = [0.0, 0.1, 0.3, 0.8]
        rewards = [reward_velocity_tracking(np.array([0.0, 0.5 + e]), a, p, prev_a=a)
                   for e in errs]
        assert all(r1 > r2 for r1, r2 in zip(rewards, rewards[1:]))

    def test_action_change_penalized(self):
        p = self.params()
        s = np.array([0.0, 0.5])
        r_still = reward_velocity_tracking(s, np.array([0.2]), p, prev_a=np.array([0.2]))
        r_moved = reward_velocity_tracking(s, np.array([0.8]), p, prev_a=np.array([0.2]))
        assert r_still > r_moved

    def test_no_prev_action_still_evaluable(self):
        r = reward_velocity_tracking(np.array([0.0, 0.4]), np.array([1.0]), self.params())
        assert r == pytest.approx(-0.01)

    def test_posture_term(self):
        p = {**self.params(), "w_posture": 2.0, "posture_index": [0], "posture_target": [1.0]}
        s = np.array([0.0, 0.5])
        a = np.array([0.0])
        assert reward_velocity_tracking(s, a, p, prev_a=a) == pytest.approx(-2.0)


class TestPlan:
    def cfg(self, **kw):
        base = dict(horizon=3, n_pop=50, discount=0.9)
        base.update(kw)
        return MpcConfig(**base)

    def lim(self):
        return ConstraintLimits.uniform(1, -1.0, 1.0, 5.0, 500.0, 100000.0, 0.02)

    def test_oracle_equivalence_dense_candidates(self):
        # H=1, candidates enumerated densely: chosen action drives s toward 0
        model = IdentityDynamics()
        reward = quad_reward()
        hist = ActionHistory.constant(np.zeros(1))
        cands = np.linspace(-1, 1, 201).reshape(201, 1, 1)
        s0 = np.array([0.37])
        a, diag = plan(model, s0, hist, MpcConfig(horizon=1, n_pop=1, discount=1.0),
                       self.lim(), reward, candidates=cands)
        idx, ret = brute_force_best(model, s0, cands, 1.0, reward, hist.last)
        assert diag.best_index == idx
        assert diag.best_return == pytest.approx(ret)
        assert abs(s0[0] + a[0]) <= abs(s0[0])  # moves toward the origin

    def test_oracle_equivalence_multi_step_random(self):
        model = IdentityDynamics()
        reward = quad_reward()
        hist = ActionHistory.constant(np.zeros(1))
        rng = np.random.default_rng(42)
        for trial in range(20):
            cands = rng.uniform(-1, 1, size=(64, 4, 1))
            s0 = rng.uniform(-2, 2, size=1)
            gamma = rng.uniform(0.5, 1.0)
            _, diag = plan(model, s0, hist, MpcConfig(horizon=4, n_pop=1, discount=gamma),
                           self.lim(), reward, candidates=cands)
            idx, ret = brute_force_best(model, s0, cands, gamma, reward, hist.last)
            assert diag.best_index == idx
            assert diag.best_return == pytest.approx(ret, rel=1e-12)

    def test_single_candidate_returned_regardless_of_reward(self):
        model = IdentityDynamics()
        hist = ActionHistory.constant(np.zeros(1))
        a, diag = plan(model, np.array([5.0]), hist, self.cfg(n_pop=1), self.lim(),
                       quad_reward(), seed=0)
        seq_only, _ = plan(model, np.array([-5.0]), hist, self.cfg(n_pop=1), self.lim(),
                           quad_reward(), seed=0)
        np.testing.assert_array_equal(a, seq_only)
        assert diag.best_index == 0

    def test_determinism_per_seed(self):
        model = IdentityDynamics()
        hist = ActionHistory.constant(np.zeros(1))
        a1, _ = plan(model, np.array([0.2]), hist, self.cfg(), self.lim(), quad_reward(), seed=7)
        a2, _ = plan(model, np.array([0.2]), hist, self.cfg(), self.lim(), quad_reward(), seed=7)
        np.testing.assert_array_equal(a1, a2)

    def test_argmax_invariant_to_positive_affine_reward(self):
        model = IdentityDynamics()
        hist = ActionHistory.constant(np.zeros(1))
        r1 = RewardSpec("velocity_tracking", {"v_des": 0.0, "w_vel": 1.0, "v_index": 0})
        r2 = RewardSpec("velocity_tracking", {"v_des": 0.0, "w_vel": 3.5, "v_index": 0})
        _, d1 = plan(model, np.array([0.4]), hist, self.cfg(), self.lim(), r1, seed=3)
        _, d2 = plan(model, np.array([0.4]), hist, self.cfg(), self.lim(), r2, seed=3)
        assert d1.best_index == d2.best_index

    def test_nonfinite_candidates_get_minus_inf(self):
        class SometimesNaN:
            def predict_next_batch(self, states, actions, context=None):
                out = states + actions
                out[actions[:, 0] > 0.5] = np.nan
                return out

        hist = ActionHistory.constant(np.zeros(1))
        cands = np.array([[[0.9]], [[0.1]]])
        _, diag = plan(SometimesNaN(), np.array([0.0]), hist,
                       MpcConfig(horizon=1, n_pop=1), self.lim(), quad_reward(),
                       candidates=cands)
        assert diag.best_index == 1

    def test_all_nonfinite_raises(self):
        class AlwaysNaN:
            def predict_next_batch(self, states, actions, context=None):
                return np.full_like(states, np.nan)

        hist = ActionHistory.constant(np.zeros(1))
        with pytest.raises(PlanningError):
            plan(AlwaysNaN(), np.array([0.0]), hist, self.cfg(), self.lim(),
                 quad_reward(), seed=0)


class TestVelocitySchedule:
    def test_constant(self):
        f = velocity_schedule({"type": "constant", "v": 0.3})
        assert f(0.0) == f(5.0) == 0.3

    def test_ramp(self):
        f = velocity_schedule({"type": "ramp", "v_start": 0.5, "v_end": -0.2, "duration": 10.0})
        assert f(0.0) == pytest.approx(0.5)
        assert f(5.0) == pytest.approx(0.15)
        assert f(10.0) == pytest.approx(-0.2)
        assert f(99.0) == pytest.approx(-0.2)  # clamps past the end

    def test_piecewise_random_seeded(self):
        spec = {"type": "piecewise_random", "v_min": -0.2, "v_max": 0.5,
                "interval": 2.0, "duration": 10.0}
        f1 = velocity_schedule(spec, seed=4)
        f2 = velocity_schedule(spec, seed=4)
        ts = np.linspace(0, 10, 101)
        assert [f1(t) for t in ts] == [f2(t) for t in ts]
        assert f1(0.0) == f1(1.9)
        assert len({f1(t) for t in (0.0, 2.1, 4.1, 6.1, 8.1)}) > 1

    def test_none_passthrough(self):
        assert velocity_schedule(None) is None


def cart_setup():
    env = FrictionCartEnv(condition=ConditionSpec("friction", {"mu": 0.4}))
    lim = ConstraintLimits.uniform(1, env.descriptor.q_min, env.descriptor.q_max,
                                   3.0, 300.0, 60000.0, env.descriptor.dt)
    model = DynamicsModel(2, 1, hidden_dims=(16,), seed=0)
    cfg = MpcConfig(horizon=5, n_pop=32, discount=0.95)
    rew = RewardSpec("velocity_tracking", {"v_des": 0.3, "w_vel": 1.0, "w_act": 0.02})
    return env, model, cfg, lim, rew


class TestRunEpisode:
    def test_zero_steps_logs_initial_state_only(self):
        env, model, cfg, lim, rew = cart_setup()
        log = run_episode(env, model, cfg, lim, rew, T=0, seed=0)
        assert log.n_steps == 0
        np.testing.assert_array_equal(log.initial_state, np.zeros(2))
        np.testing.assert_array_equal(log.final_state, np.zeros(2))

    def test_logs_have_consistent_lengths(self):
        env, model, cfg, lim, rew = cart_setup()
        log = run_episode(env, model, cfg, lim, rew, T=8, seed=1)
        assert log.n_steps == 8
        assert len(log.states) == len(log.actions) == len(log.rewards) == 8
        assert all(isinstance(d, PlanDiagnostics) for d in log.diagnostics)

    def test_identical_seeds_identical_logs(self):
        logs = []
        for _ in range(2):
            env, model, cfg, lim, rew = cart_setup()
            logs.append(run_episode(env, model, cfg, lim, rew, T=10, seed=3))
        np.testing.assert_array_equal(logs[0].states_array(), logs[1].states_array())
        np.testing.assert_array_equal(logs[0].actions_array(), logs[1].actions_array())
        np.testing.assert_array_equal(logs[0].rewards_array(), logs[1].rewards_array())

    def test_early_termination_flagged(self):
        env, model, cfg, lim, rew = cart_setup()
        env.condition = ConditionSpec("external_force", {"force": 600.0})
        log = run_episode(env, model, cfg, lim, rew, T=10, seed=0)
        assert log.terminated_early
        assert log.n_steps < 10

    def test_executed_actions_satisfy_limits(self):
        from metampc.sampling import check_sequence

        env, model, cfg, lim, rew = cart_setup()
        log = run_episode(env, model, cfg, lim, rew, T=20, seed=5)
        hist = ActionHistory.constant(np.asarray(env.descriptor.neutral_action))
        assert check_sequence(log.actions_array(), hist, lim) == []


class TestEpisodeLogIO:
    def test_roundtrip(self, tmp_path):
        env, model, cfg, lim, rew = cart_setup()
        log = run_episode(env, model, cfg, lim, rew, T=6, seed=2,
                          header={"note": "roundtrip"})
        prefix = str(tmp_path / "episode")
        log.save(prefix)
        loaded = EpisodeLog.load(prefix)
        np.testing.assert_array_equal(loaded.states_array(), log.states_array())
        np.testing.assert_array_equal(loaded.actions_array(), log.actions_array())
        np.testing.assert_array_equal(loaded.rewards_array(), log.rewards_array())
        assert loaded.header["note"] == "roundtrip"
        assert loaded.diagnostics[0].best_index == log.diagnostics[0].best_index
