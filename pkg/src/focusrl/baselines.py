"""Non-learning references for the focus task.

Three ways to solve a stack without a network: an exact tabular model
solved by value iteration (the optimal-policy ceiling), a classical
coarse-to-fine hill climb over the sharpness measure, and an exhaustive
scan.  Trained agents are judged against these.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from focusrl.agent import EvalReport
from focusrl.env import (
    ACTION_DELTAS_RAD,
    Action,
    AutofocusEnv,
    EnvConfig,
    EpisodeOutcome,
    is_success,
    reward,
)
from focusrl.focus import FocusCurve, focus_curve
from focusrl.imaging import FocalStack

TERMINAL_OUTCOMES = (
    EpisodeOutcome.SUCCESS_TERMINATE,
    EpisodeOutcome.FAIL_TERMINATE_BLUR,
    EpisodeOutcome.FAIL_OUT_OF_RANGE,
    EpisodeOutcome.FAIL_MAX_STEPS,
)


@dataclass(frozen=True)
class DiscreteMdp:
    """Exact tabular model of one stack's episode dynamics.

    States are (position index, steps-taken) pairs laid out as
    `steps * n_positions + index`, plus one absorbing terminal state at the
    end.  Built from the focus curve and the movement rules alone, on
    purpose: tests cross-check every entry against the simulator, and that
    check only means something if the two are written independently.
    """

    n_positions: int
    max_steps: int
    gamma_hint: float
    next_state: np.ndarray  # (n_states, n_actions) int
    rewards: np.ndarray  # (n_states, n_actions) float
    done: np.ndarray  # (n_states, n_actions) bool
    outcome_code: np.ndarray  # (n_states, n_actions) int, index into TERMINAL_OUTCOMES + Running

    @property
    def n_states(self) -> int:
        return self.n_positions * self.max_steps + 1

    @property
    def terminal_state(self) -> int:
        return self.n_states - 1

    def state_id(self, index: int, steps: int) -> int:
        if not 0 <= index < self.n_positions:
            raise ValueError(f"index {index} outside [0, {self.n_positions})")
        if not 0 <= steps < self.max_steps:
            raise ValueError(f"steps {steps} outside [0, {self.max_steps})")
        return steps * self.n_positions + index

    def outcome_of(self, state: int, action: int) -> EpisodeOutcome:
        code = int(self.outcome_code[state, action])
        return EpisodeOutcome.RUNNING if code < 0 else TERMINAL_OUTCOMES[code]


def mdp_from_stack(stack: FocalStack, cfg: EnvConfig | None = None) -> DiscreteMdp:
    """Tabulate transitions, rewards, and outcomes for every decision point."""
    if cfg is None:
        cfg = EnvConfig(stack=stack)
    elif cfg.stack is not stack:
        raise ValueError("cfg must wrap the same stack")
    curve = stack.focus_values / stack.focus_max
    n = len(stack)
    actions = list(Action)
    index_steps = {act: int(round(ACTION_DELTAS_RAD[act] / stack.spacing)) for act in actions}
    n_states = n * cfg.max_steps + 1
    terminal = n_states - 1
    next_state = np.full((n_states, len(actions)), terminal, dtype=np.int64)
    rewards = np.zeros((n_states, len(actions)), dtype=np.float64)
    done = np.ones((n_states, len(actions)), dtype=bool)
    outcome_code = np.full((n_states, len(actions)), -1, dtype=np.int64)

    for steps in range(cfg.max_steps):
        for index in range(n):
            sid = steps * n + index
            for act in actions:
                a = int(act)
                if act is Action.TERMINATE:
                    ok = is_success(float(curve[index]), cfg)
                    out = (
                        EpisodeOutcome.SUCCESS_TERMINATE
                        if ok
                        else EpisodeOutcome.FAIL_TERMINATE_BLUR
                    )
                    rewards[sid, a] = reward(float(curve[index]), out, cfg)
                    outcome_code[sid, a] = TERMINAL_OUTCOMES.index(out)
                    continue
                target = index + index_steps[act]
                if not 0 <= target < n:
                    # Rejected move: the stage stays put and the episode fails.
                    out = EpisodeOutcome.FAIL_OUT_OF_RANGE
                    rewards[sid, a] = reward(float(curve[index]), out, cfg)
                    outcome_code[sid, a] = TERMINAL_OUTCOMES.index(out)
                elif steps + 1 >= cfg.max_steps:
                    out = EpisodeOutcome.FAIL_MAX_STEPS
                    rewards[sid, a] = reward(float(curve[target]), out, cfg)
                    outcome_code[sid, a] = TERMINAL_OUTCOMES.index(out)
                else:
                    next_state[sid, a] = (steps + 1) * n + target
                    rewards[sid, a] = reward(
                        float(curve[target]), EpisodeOutcome.RUNNING, cfg
                    )
                    done[sid, a] = False
    # Absorbing terminal: already all-done, zero reward, self-looping target.
    next_state[terminal, :] = terminal
    return DiscreteMdp(
        n_positions=n,
        max_steps=cfg.max_steps,
        gamma_hint=0.99,
        next_state=next_state,
        rewards=rewards,
        done=done,
        outcome_code=outcome_code,
    )


def value_iteration(mdp: DiscreteMdp, gamma: float, tol: float = 1e-9) -> np.ndarray:
    """Iterate Q <- r + gamma * max Q' to sup-norm convergence below tol."""
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    q = np.zeros((mdp.n_states, mdp.next_state.shape[1]), dtype=np.float64)
    cont = ~mdp.done
    while True:
        v = q.max(axis=1)
        q_new = mdp.rewards + gamma * np.where(cont, v[mdp.next_state], 0.0)
        q_new[mdp.terminal_state, :] = 0.0
        delta = float(np.abs(q_new - q).max())
        q = q_new
        if delta < tol:
            return q


def greedy_action(q_table: np.ndarray, mdp: DiscreteMdp, index: int, steps: int) -> Action:
    """Greedy action at a decision point; ties go to the lowest code."""
    return Action(int(np.argmax(q_table[mdp.state_id(index, steps)])))


def greedy_policy_report(q_table: np.ndarray, mdp: DiscreteMdp, env: AutofocusEnv) -> EvalReport:
    """Run the Q-table's greedy policy through the simulator from every start."""
    episodes = []
    for start in range(env.n_positions):
        env.reset_at(start)
        while not env.done:
            env.step(greedy_action(q_table, mdp, env.position_index, env.steps_taken))
        episodes.append(
            (env.outcome, env.steps_taken, float(env.normalized_curve[env.position_index]))
        )
    return EvalReport.from_episodes(episodes)


def min_steps_bfs(mdp: DiscreteMdp, start_index: int) -> int | None:
    """Fewest actions (moves plus the Terminate) to end a success episode.

    Plain breadth-first search over the tabulated dynamics; None when no
    action sequence from this start can succeed within the step budget.
    """
    from collections import deque

    n_actions = mdp.next_state.shape[1]
    seen = {mdp.state_id(start_index, 0)}
    queue = deque([(mdp.state_id(start_index, 0), 0)])
    while queue:
        state, depth = queue.popleft()
        for a in range(n_actions):
            if mdp.outcome_of(state, a) is EpisodeOutcome.SUCCESS_TERMINATE:
                return depth + 1
            if not mdp.done[state, a]:
                nxt = int(mdp.next_state[state, a])
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append((nxt, depth + 1))
    return None


# -- classical hill climb ------------------------------------------------


def _measure(env: AutofocusEnv) -> float:
    return float(env.normalized_curve[env.position_index])


class _Climber:
    """One hill-climb episode driven through the simulator.

    Shape of the search: a fine probe fixes the uphill direction, a coarse
    ascent rides it until the measure drops, one coarse back-up, then a
    fine ascent with a single allowed reversal that terminates at its
    first drop.  All measure readings come from the simulator, and the
    climber knows the stage limits, so it never commands an out-of-range
    move.  A budget guard spends the last allowed action on Terminate.
    """

    def __init__(self, env: AutofocusEnv):
        self.env = env
        self.fine = 1  # index steps per fine move; coarse is the ratio below
        self.coarse = abs(
            int(round(ACTION_DELTAS_RAD[Action.COARSE_POSITIVE] / env.cfg.stack.spacing))
        )

    def _in_range(self, delta: int) -> bool:
        return 0 <= self.env.position_index + delta < self.env.n_positions

    def _move(self, delta: int) -> float:
        """Issue the move action for a signed index delta; returns new measure."""
        for act, rad in ACTION_DELTAS_RAD.items():
            if act is not Action.TERMINATE and int(round(rad / self.env.cfg.stack.spacing)) == delta:
                self.env.step(act)
                return _measure(self.env)
        raise ValueError(f"no action moves {delta} indices")

    def _out_of_budget(self) -> bool:
        # Keep one action in hand for Terminate.
        return self.env.steps_taken >= self.env.cfg.max_steps - 1

    def run(self, start_index: int) -> tuple[EpisodeOutcome, int, float]:
        env = self.env
        env.reset_at(start_index)
        here = _measure(env)
        if env.n_positions == 1 or self._out_of_budget():
            return self._terminate()

        # Fine probe: try positive first, mirrored at the upper edge.
        sign = 1 if self._in_range(self.fine) else -1
        probed = self._move(sign * self.fine)
        if probed > here:
            direction, here = sign, probed
        else:
            if self._out_of_budget():
                return self._terminate()
            here = self._move(-sign * self.fine)  # back to the start
            direction = -sign
            if self._out_of_budget() or not self._in_range(direction * self.fine):
                return self._terminate()
            nxt = self._move(direction * self.fine)
            if nxt <= here:
                # Downhill both ways: the start was the local maximum.
                return self._terminate()
            here = nxt

        # Coarse ascent.
        while not self._out_of_budget() and self._in_range(direction * self.coarse):
            nxt = self._move(direction * self.coarse)
            if nxt > here:
                here = nxt
                continue
            if self._out_of_budget():
                return self._terminate()
            here = self._move(-direction * self.coarse)  # back up one coarse step
            break

        # Fine ascent; the first drop may reverse once, the second ends it.
        reversed_once = False
        while not self._out_of_budget():
            if not self._in_range(direction * self.fine):
                if reversed_once:
                    break
                reversed_once = True
                direction = -direction
                continue
            nxt = self._move(direction * self.fine)
            if nxt > here:
                here = nxt
            elif reversed_once:
                break
            else:
                reversed_once = True
                direction = -direction
        return self._terminate()

    def _terminate(self) -> tuple[EpisodeOutcome, int, float]:
        env = self.env
        env.step(Action.TERMINATE)
        return env.outcome, env.steps_taken, _measure(env)


def hill_climb_episode(env: AutofocusEnv, start_index: int) -> tuple[EpisodeOutcome, int, float]:
    """Coarse-to-fine search from one start; (outcome, actions, end focus)."""
    return _Climber(env).run(start_index)


def hill_climb(env: AutofocusEnv) -> EvalReport:
    """Coarse-to-fine search from every start index."""
    climber = _Climber(env)
    return EvalReport.from_episodes([climber.run(i) for i in range(env.n_positions)])


@dataclass(frozen=True)
class ScanResult:
    argmax_index: int
    evaluations: int
    position_rad: float


def exhaustive_scan(stack: FocalStack) -> ScanResult:
    """Measure every frame, return the first argmax and the cost in reads."""
    if len(stack) == 0:
        raise ValueError("cannot scan an empty stack")
    curve: FocusCurve = focus_curve(stack)
    return ScanResult(
        argmax_index=curve.argmax_index,
        evaluations=len(stack),
        position_rad=float(stack.positions[curve.argmax_index]),
    )
