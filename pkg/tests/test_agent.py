"""DQN training loop pieces: schedule, replay, targets, evaluation."""

import json

import numpy as np
import pytest

from focusrl.agent import (
    HISTOGRAM_BUCKETS,
    LOG_HEADER,
    Adam,
    EvalReport,
    Hyperparams,
    ReplayBuffer,
    StartMode,
    TargetValueCache,
    bellman_target,
    epsilon_schedule,
    evaluate,
    greedy_policy,
    max_target_values,
    run_episode,
    select_action,
    train,
    train_step,
)
from focusrl.env import (
    Action,
    AutofocusEnv,
    EnvConfig,
    EpisodeOutcome,
    Transition,
)
from focusrl.net import (
    REDUCED_CHECK_ARCH,
    Mode,
    copy_params,
    forward_batch,
    init_params,
    learnable_names,
    load_checkpoint,
    states_to_batch,
)

ARCH = REDUCED_CHECK_ARCH


@pytest.fixture
def env16(tiny_stack):
    return AutofocusEnv(EnvConfig(stack=tiny_stack, net_input_size=16))


@pytest.fixture
def params16(rng):
    return init_params(ARCH, np.random.default_rng(5))


def _pinned_q_params(q_values):
    """Parameters that make every forward pass return exactly `q_values`."""
    params = init_params(ARCH, np.random.default_rng(0))
    for name, arr in params.items():
        if name.endswith("_rvar"):
            arr[...] = 1.0
        else:
            arr[...] = 0.0
    params["head_b"][...] = np.asarray(q_values, dtype=np.float32)
    return params


def _fill_buffer(env, rng, buffer_or_list, steps):
    state = env.reset(rng)
    for _ in range(steps):
        action = Action(int(rng.integers(5)))
        tr = env.step(action)
        buffer_or_list.append(tr) if isinstance(buffer_or_list, list) else buffer_or_list.push(tr)
        state = tr.next_state if not tr.done else env.reset(rng)
    return state


class TestHyperparams:
    def test_defaults(self):
        hyper = Hyperparams(total_timesteps=100_000)
        assert hyper.gamma == 0.99
        assert hyper.epsilon_start == 1.0
        assert hyper.epsilon_end == 0.1
        assert hyper.replay_capacity == 10_000
        assert hyper.batch_size == 32
        assert hyper.learning_rate == 1e-4
        assert hyper.target_sync == 1_000
        assert hyper.learn_start == 1_000
        assert hyper.eval_interval == 1_000

    def test_validation(self):
        with pytest.raises(ValueError):
            Hyperparams(total_timesteps=100, gamma=1.0)
        with pytest.raises(ValueError):
            Hyperparams(total_timesteps=100, gamma=0.0)
        with pytest.raises(ValueError):
            Hyperparams(total_timesteps=100, epsilon_start=1.5)
        with pytest.raises(ValueError):
            Hyperparams(total_timesteps=100, epsilon_fraction=0.0)
        with pytest.raises(ValueError):
            Hyperparams(total_timesteps=100, replay_capacity=8, batch_size=16)
        with pytest.raises(ValueError):
            Hyperparams(total_timesteps=0)


class TestEpsilonSchedule:
    def test_pinned_points_100k(self):
        hyper = Hyperparams(total_timesteps=100_000)
        assert epsilon_schedule(0, hyper) == 1.0
        assert epsilon_schedule(25_000, hyper) == pytest.approx(0.55)
        assert epsilon_schedule(50_000, hyper) == 0.1
        assert epsilon_schedule(99_999, hyper) == 0.1

    def test_floor_is_exact(self):
        hyper = Hyperparams(total_timesteps=20_000)
        assert epsilon_schedule(10_000, hyper) == hyper.epsilon_end
        assert epsilon_schedule(19_999, hyper) == hyper.epsilon_end

    def test_monotone_and_bounded(self):
        hyper = Hyperparams(total_timesteps=4_000)
        values = [epsilon_schedule(t, hyper) for t in range(4_000)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert all(hyper.epsilon_end <= v <= hyper.epsilon_start for v in values)


class TestReplayBuffer:
    @staticmethod
    def _sentinel(i):
        return Transition(
            state=None,
            action=Action.TERMINATE,
            reward=float(i),
            next_state=None,
            done=True,
            outcome=EpisodeOutcome.SUCCESS_TERMINATE,
        )

    def test_size_capped_at_capacity(self):
        buf = ReplayBuffer(4)
        for i in range(9):
            buf.push(self._sentinel(i))
        assert len(buf) == 4
        assert buf.inserted == 9

    def test_fifo_eviction(self):
        buf = ReplayBuffer(4)
        for i in range(6):
            buf.push(self._sentinel(i))
        held = sorted(tr.reward for tr in buf)
        assert held == [2.0, 3.0, 4.0, 5.0]

    def test_sample_draws_only_held_items(self, rng):
        buf = ReplayBuffer(8)
        for i in range(20):
            buf.push(self._sentinel(i))
        batch = buf.sample(rng, 64)
        assert len(batch) == 64
        assert all(12 <= tr.reward < 20 for tr in batch)

    def test_sample_is_roughly_uniform(self):
        buf = ReplayBuffer(4)
        for i in range(4):
            buf.push(self._sentinel(i))
        rng = np.random.default_rng(0)
        counts = np.zeros(4)
        for tr in buf.sample(rng, 8_000):
            counts[int(tr.reward)] += 1
        assert counts.min() > 1_700 and counts.max() < 2_300


class TestAdam:
    def test_matches_reference_formula(self):
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        opt = Adam(lr, b1, b2, eps)
        params = {"w": np.array([1.0, -2.0], dtype=np.float64)}
        ref = params["w"].copy()
        m = np.zeros(2)
        v = np.zeros(2)
        rng = np.random.default_rng(3)
        for t in range(1, 4):
            grad = rng.standard_normal(2)
            opt.step(params, {"w": grad.copy()})
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            ref -= lr * m_hat / (np.sqrt(v_hat) + eps)
            np.testing.assert_allclose(params["w"], ref, rtol=1e-12)

    def test_zero_gradient_moves_nothing(self):
        opt = Adam(1e-3)
        params = {"w": np.array([5.0])}
        opt.step(params, {"w": np.array([0.0])})
        assert params["w"][0] == 5.0


class TestSelectAction:
    def test_greedy_argmax(self, env16):
        params = _pinned_q_params([1.0, 5.0, 2.0, 0.0, 0.0])
        state = env16.reset_at(0)
        rng = np.random.default_rng(0)
        assert select_action(params, ARCH, state, 0.0, rng) == Action.FINE_POSITIVE

    def test_tie_breaks_to_lowest_code(self, env16):
        params = _pinned_q_params([3.0, 3.0, 0.0, 0.0, 0.0])
        state = env16.reset_at(0)
        rng = np.random.default_rng(0)
        assert select_action(params, ARCH, state, 0.0, rng) == Action.COARSE_POSITIVE

    def test_uniform_at_full_epsilon(self, env16, params16):
        state = env16.reset_at(0)
        rng = np.random.default_rng(7)
        counts = np.zeros(5)
        for _ in range(10_000):
            counts[int(select_action(params16, ARCH, state, 1.0, rng))] += 1
        assert counts.min() >= 1_800
        assert counts.max() <= 2_200

    def test_rejects_bad_epsilon(self, env16, params16):
        state = env16.reset_at(0)
        with pytest.raises(ValueError):
            select_action(params16, ARCH, state, 1.5, np.random.default_rng(0))


class TestBellmanTarget:
    def test_terminal_is_raw_reward(self, env16, params16):
        peak = int(np.argmax(env16.normalized_curve))
        env16.reset_at(peak)
        tr = env16.step(Action.TERMINATE)
        assert tr.done
        assert bellman_target(tr, params16, ARCH, gamma=0.99) == pytest.approx(100.0)

    def test_bootstrap_arithmetic(self, env16):
        env16.reset_at(5)
        tr = env16.step(Action.FINE_POSITIVE)
        assert not tr.done
        params = _pinned_q_params([50.0, 10.0, 0.0, 0.0, 0.0])
        expected = tr.reward + 0.99 * 50.0
        assert bellman_target(tr, params, ARCH, gamma=0.99) == pytest.approx(expected, abs=1e-5)
        # the spec's worked example: r = -2, max Q' = 50 gives 47.5
        assert -2.0 + 0.99 * 50.0 == pytest.approx(47.5)

    def test_cache_does_not_change_result(self, env16, params16):
        env16.reset_at(3)
        tr = env16.step(Action.COARSE_POSITIVE)
        cache = TargetValueCache()
        a = bellman_target(tr, params16, ARCH, 0.9, cache)
        b = bellman_target(tr, params16, ARCH, 0.9, cache)
        c = bellman_target(tr, params16, ARCH, 0.9)
        assert a == b
        assert a == pytest.approx(c, abs=1e-6)
        assert len(cache) == 1

    def test_fixed_point_consistency(self, tiny_stack):
        # at the value-iteration fixed point, the target operator reproduces
        # the optimal Q-table: Q*(s,a) = r + gamma * max Q*(s',.)
        from focusrl.baselines import mdp_from_stack, value_iteration

        mdp = mdp_from_stack(tiny_stack)
        gamma = 0.8
        q = value_iteration(mdp, gamma=gamma)
        v = q.max(axis=1)
        targets = mdp.rewards + gamma * np.where(~mdp.done, v[mdp.next_state], 0.0)
        targets[mdp.terminal_state, :] = 0.0
        assert np.abs(targets - q).max() < 1e-6


class TestMaxTargetValues:
    def test_cache_hits_skip_recomputation(self, env16, params16):
        s1 = env16.reset_at(2)
        s2 = env16.step(Action.FINE_POSITIVE).next_state
        cache = TargetValueCache()
        first = max_target_values(params16, ARCH, [s1, s2, s1], cache)
        assert len(cache) == 2
        second = max_target_values(params16, ARCH, [s1, s2], cache)
        np.testing.assert_array_equal(first[:2], second)

    def test_matches_direct_forward(self, env16, params16):
        state = env16.reset_at(4)
        x, onehot = states_to_batch([state], ARCH)
        q, _ = forward_batch(params16, ARCH, x, onehot, Mode.INFER)
        values = max_target_values(params16, ARCH, [state], None)
        assert values[0] == pytest.approx(float(q[0].max()), abs=1e-7)


class TestTrainStep:
    def _batch(self, env, rng, n=8):
        batch = []
        _fill_buffer(env, rng, batch, n)
        return batch

    def test_exact_targets_give_zero_loss_and_no_update(self, env16):
        rng = np.random.default_rng(11)
        params = init_params(ARCH, np.random.default_rng(1))
        raw = self._batch(env16, rng)
        x, onehot = states_to_batch([tr.state for tr in raw], ARCH)
        q, _ = forward_batch(params, ARCH, x, onehot, Mode.TRAIN)
        batch = [
            Transition(
                state=tr.state,
                action=tr.action,
                reward=float(q[i, int(tr.action)]),
                next_state=tr.next_state,
                done=True,
                outcome=EpisodeOutcome.SUCCESS_TERMINATE,
            )
            for i, tr in enumerate(raw)
        ]
        before = copy_params(params)
        loss = train_step(params, before, ARCH, batch, Adam(1e-3), gamma=0.9)
        assert loss == 0.0
        for name in learnable_names(ARCH):
            np.testing.assert_array_equal(params[name], before[name])

    def test_one_step_reduces_loss(self, env16):
        rng = np.random.default_rng(13)
        params = init_params(ARCH, np.random.default_rng(2))
        target = copy_params(params)
        batch = self._batch(env16, rng)
        opt = Adam(1e-3)
        first = train_step(params, target, ARCH, batch, opt, gamma=0.9)
        second = train_step(params, target, ARCH, batch, opt, gamma=0.9)
        assert second < first

    def test_loss_invariant_to_batch_order(self, env16):
        rng = np.random.default_rng(17)
        batch = self._batch(env16, rng)
        a = train_step(
            init_params(ARCH, np.random.default_rng(3)),
            init_params(ARCH, np.random.default_rng(3)),
            ARCH, batch, Adam(1e-4), gamma=0.9,
        )
        b = train_step(
            init_params(ARCH, np.random.default_rng(3)),
            init_params(ARCH, np.random.default_rng(3)),
            ARCH, list(reversed(batch)), Adam(1e-4), gamma=0.9,
        )
        assert a == pytest.approx(b, rel=1e-5)

    def test_rejects_empty_batch(self, params16):
        with pytest.raises(ValueError):
            train_step(params16, params16, ARCH, [], Adam(1e-4), gamma=0.9)

    def test_aborts_on_non_finite_loss(self, env16):
        rng = np.random.default_rng(19)
        params = init_params(ARCH, np.random.default_rng(4))
        batch = self._batch(env16, rng, n=4)
        bad = [
            Transition(
                state=tr.state, action=tr.action, reward=float("nan"),
                next_state=tr.next_state, done=True, outcome=tr.outcome,
            )
            for tr in batch
        ]
        with pytest.raises(RuntimeError, match="non-finite"):
            train_step(params, params, ARCH, bad, Adam(1e-4), gamma=0.9)


class TestEvalReport:
    def test_from_episodes_arithmetic(self):
        episodes = [
            (EpisodeOutcome.SUCCESS_TERMINATE, 3, 0.95),
            (EpisodeOutcome.SUCCESS_TERMINATE, 5, 1.0),
            (EpisodeOutcome.FAIL_TERMINATE_BLUR, 2, 0.4),
            (EpisodeOutcome.FAIL_MAX_STEPS, 20, 0.55),
        ]
        report = EvalReport.from_episodes(episodes)
        assert report.episodes == 4
        assert report.accuracy == pytest.approx(0.5)
        assert report.avg_steps == pytest.approx(7.5)
        assert report.outcome_counts["SuccessTerminate"] == 2
        assert report.outcome_counts["FailTerminateBlur"] == 1
        assert sum(report.histogram) == 4

    def test_histogram_buckets(self):
        episodes = [
            (EpisodeOutcome.SUCCESS_TERMINATE, 1, 1.0),   # top bucket
            (EpisodeOutcome.SUCCESS_TERMINATE, 1, 0.95),  # bucket 9
            (EpisodeOutcome.FAIL_TERMINATE_BLUR, 1, 0.0),  # bucket 0
            (EpisodeOutcome.FAIL_TERMINATE_BLUR, 1, 0.39),  # bucket 3
        ]
        report = EvalReport.from_episodes(episodes)
        assert len(report.histogram) == HISTOGRAM_BUCKETS
        assert report.histogram[9] == 2
        assert report.histogram[0] == 1
        assert report.histogram[3] == 1

    def test_round_trip(self, tmp_path):
        report = EvalReport.from_episodes(
            [(EpisodeOutcome.SUCCESS_TERMINATE, 2, 0.97)]
        )
        assert EvalReport.from_dict(report.to_dict()) == report
        path = tmp_path / "report.json"
        report.save(path)
        assert EvalReport.from_dict(json.loads(path.read_text())) == report

    def test_histogram_sum_validated(self):
        with pytest.raises(ValueError):
            EvalReport(
                episodes=2, accuracy=0.5, avg_steps=1.0,
                outcome_counts={}, histogram=(1,) * HISTOGRAM_BUCKETS,
            )


class TestEvaluate:
    def test_always_terminate_accuracy_is_region_fraction(self, env16):
        params = _pinned_q_params([0.0, 0.0, 1.0, 0.0, 0.0])
        report = evaluate(params, ARCH, env16)
        expected = len(env16.success_region) / env16.n_positions
        assert report.episodes == env16.n_positions
        assert report.accuracy == pytest.approx(expected)
        assert report.avg_steps == 1.0

    def test_always_coarse_positive_never_succeeds(self, env16):
        params = _pinned_q_params([1.0, 0.0, 0.0, 0.0, 0.0])
        report = evaluate(params, ARCH, env16)
        assert report.accuracy == 0.0
        assert report.outcome_counts.get("SuccessTerminate", 0) == 0

    def test_oracle_policy_is_perfect(self, tiny_stack, env16):
        from focusrl.baselines import greedy_action, mdp_from_stack, value_iteration

        mdp = mdp_from_stack(tiny_stack)
        q = value_iteration(mdp, gamma=0.9)
        results = []
        for start in range(env16.n_positions):
            env16.reset_at(start)
            while not env16.done:
                env16.step(greedy_action(q, mdp, env16.position_index, env16.steps_taken))
            results.append(
                (env16.outcome, env16.steps_taken,
                 float(env16.normalized_curve[env16.position_index]))
            )
        report = EvalReport.from_episodes(results)
        assert report.accuracy == 1.0

    def test_random_uniform_needs_episode_count(self, env16, params16):
        with pytest.raises(ValueError):
            evaluate(params16, ARCH, env16, start_mode=StartMode.RANDOM_UNIFORM)

    def test_never_mutates_params(self, env16, params16):
        before = {k: v.copy() for k, v in params16.items()}
        evaluate(params16, ARCH, env16)
        for k, v in before.items():
            np.testing.assert_array_equal(params16[k], v)

    def test_threaded_equals_serial(self, env16, params16):
        serial = evaluate(params16, ARCH, env16, threads=1)
        threaded = evaluate(params16, ARCH, env16, threads=3)
        assert serial == threaded

    def test_run_episode_counts_terminate(self, env16):
        policy = lambda state: Action.TERMINATE  # noqa: E731
        peak = int(np.argmax(env16.normalized_curve))
        outcome, steps, focus = run_episode(env16, policy, start_index=peak)
        assert outcome is EpisodeOutcome.SUCCESS_TERMINATE
        assert steps == 1
        assert focus == 1.0


class TestTrain:
    HYPER = dict(
        replay_capacity=256,
        batch_size=16,
        target_sync=50,
        learn_start=60,
        eval_interval=100,
        gamma=0.9,
    )

    def test_no_learning_before_learn_start(self, env16, tmp_path):
        hyper = Hyperparams(total_timesteps=50, **self.HYPER)
        _, history = train(env16, hyper, ARCH, np.random.default_rng(0), tmp_path / "run")
        assert len(history) == 1  # final-step eval only
        assert history[0]["timestep"] == 50
        assert history[0]["loss"] is None

    def test_losses_appear_after_learn_start(self, env16, tmp_path):
        hyper = Hyperparams(total_timesteps=200, **self.HYPER)
        _, history = train(env16, hyper, ARCH, np.random.default_rng(0), tmp_path / "run")
        assert [row["timestep"] for row in history] == [100, 200]
        assert history[0]["loss"] is not None
        assert history[1]["loss"] is not None

    def test_fixed_seed_is_bit_identical(self, tiny_stack, tmp_path):
        hyper = Hyperparams(total_timesteps=150, **self.HYPER)
        outputs = []
        for name in ("a", "b"):
            env = AutofocusEnv(EnvConfig(stack=tiny_stack, net_input_size=16))
            out = tmp_path / name
            train(env, hyper, ARCH, np.random.default_rng(123), out)
            outputs.append(out)
        a, b = outputs
        for filename in ("train_log.csv", "ckpt_150", "eval_150.json"):
            assert (a / filename).read_bytes() == (b / filename).read_bytes(), filename

    def test_expected_artifacts_written(self, env16, tmp_path):
        hyper = Hyperparams(total_timesteps=100, **self.HYPER)
        out = tmp_path / "run"
        params, _ = train(env16, hyper, ARCH, np.random.default_rng(1), out)
        assert (out / "train_log.csv").exists()
        assert (out / "ckpt_100").exists()
        assert (out / "eval_100.json").exists()
        loaded, arch, step = load_checkpoint(out / "ckpt_100")
        assert step == 100
        assert arch == ARCH
        for name in params:
            np.testing.assert_array_equal(loaded[name], params[name])

    def test_log_header(self, env16, tmp_path):
        hyper = Hyperparams(total_timesteps=50, **self.HYPER)
        out = tmp_path / "run"
        train(env16, hyper, ARCH, np.random.default_rng(2), out)
        first_line = (out / "train_log.csv").read_text().splitlines()[0]
        assert first_line == ",".join(LOG_HEADER)

    def test_resume_from_checkpoint(self, env16, tmp_path):
        out = tmp_path / "run"
        train(
            env16,
            Hyperparams(total_timesteps=100, **self.HYPER),
            ARCH, np.random.default_rng(3), out,
        )
        params, history = train(
            env16,
            Hyperparams(total_timesteps=200, **self.HYPER),
            ARCH, np.random.default_rng(4), out,
            resume_from=out / "ckpt_100",
        )
        assert [row["timestep"] for row in history] == [200]
        _, _, step = load_checkpoint(out / "ckpt_200")
        assert step == 200

    def test_resume_past_end_rejected(self, env16, tmp_path):
        out = tmp_path / "run"
        train(
            env16,
            Hyperparams(total_timesteps=100, **self.HYPER),
            ARCH, np.random.default_rng(5), out,
        )
        with pytest.raises(ValueError, match="already"):
            train(
                env16,
                Hyperparams(total_timesteps=100, **self.HYPER),
                ARCH, np.random.default_rng(6), out,
                resume_from=out / "ckpt_100",
            )
