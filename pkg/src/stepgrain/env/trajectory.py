"""Trajectories: ordered (state, action, observation) steps of one episode."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import NonTerminalTrajectory, SchemaError
from .world import Action, EnvState, ObservationRecord, ToolWorld, parse_action, reset, step


@dataclass(frozen=True)
class Step:
    state: EnvState
    action: Action
    observation: ObservationRecord
    next_state: EnvState
    logprobs: tuple[float, ...] | None = None

    @property
    def n_tokens(self) -> int:
        return len(self.action.tokens)


@dataclass(frozen=True)
class Trajectory:
    task_id: int
    steps: tuple[Step, ...]
    rewards: tuple | None = None
    terminal: bool = True

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def final_state(self) -> EnvState:
        return self.steps[-1].next_state

    @property
    def final_action(self) -> Action:
        return self.steps[-1].action

    @property
    def token_counts(self) -> list[int]:
        return [s.n_tokens for s in self.steps]

    def with_rewards(self, rewards) -> "Trajectory":
        return replace(self, rewards=tuple(rewards))

    def require_terminal(self) -> None:
        if not self.steps or not self.terminal or not self.final_state.done:
            raise NonTerminalTrajectory(f"trajectory for task {self.task_id} is not terminal")


def rollout_actions(world: ToolWorld, task_id: int, actions: Sequence, logprobs: Sequence | None = None) -> Trajectory:
    """Replay a sequence of actions (or raw token sequences) through the env.

    Replay stops at the first terminal transition; trailing actions are an
    error because a trajectory has exactly one terminal step.
    """
    state = reset(world, task_id)
    steps = []
    for k, act in enumerate(actions):
        if state.done:
            raise SchemaError(f"action {k} follows the terminal step")
        if not isinstance(act, Action):
            act = parse_action(world.vocab, act)
        nxt, obs = step(world, state, act)
        lp = None
        if logprobs is not None and logprobs[k] is not None:
            lp = tuple(float(x) for x in logprobs[k])
        steps.append(Step(state, act, obs, nxt, lp))
        state = nxt
    return Trajectory(task_id=task_id, steps=tuple(steps), terminal=state.done)


def trajectory_to_record(traj: Trajectory) -> dict:
    """JSON-ready dict of an unannotated trajectory (one JSONL line)."""
    steps = []
    for s in traj.steps:
        steps.append(
            {
                "action_tokens": list(s.action.tokens),
                "obs_tokens": list(s.observation.tokens),
                "old_logprobs": None if s.logprobs is None else list(s.logprobs),
            }
        )
    final = traj.final_action
    return {
        "task_id": traj.task_id,
        "steps": steps,
        "final": {"answer_tokens": list(final.answer) if final.is_finish else []},
    }


def trajectory_from_record(world: ToolWorld, record: dict, line: int | None = None) -> Trajectory:
    """Rebuild a trajectory by replaying its action tokens.

    The replayed observations must match the recorded ones, otherwise the
    record was produced by a different world.
    """
    try:
        task_id = int(record["task_id"])
        raw = record["steps"]
        actions = [tuple(s["action_tokens"]) for s in raw]
        logprobs = [s.get("old_logprobs") for s in raw]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad trajectory record: {exc}", line) from None
    try:
        traj = rollout_actions(world, task_id, actions, logprobs)
    except SchemaError as exc:
        raise SchemaError(str(exc), line) from None
    except Exception as exc:  # unknown task/token, empty action
        raise SchemaError(f"{type(exc).__name__}: {exc}", line) from None
    for k, (s, r) in enumerate(zip(traj.steps, raw)):
        if "obs_tokens" in r and tuple(r["obs_tokens"]) != s.observation.tokens:
            raise SchemaError(f"step {k + 1} observation does not match the world", line)
    return traj


def flat_logprob(traj: Trajectory) -> float:
    """Sum of all recorded per-token log-probabilities."""
    return float(sum(np.sum(s.logprobs) for s in traj.steps))
