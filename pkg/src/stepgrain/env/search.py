"""Exact optimal-return oracles for small worlds.

:func:`oracle_search` enumerates every outcome-distinct action sequence up to
the horizon. :func:`solve_dp` reaches the same value by memoised recursion
over ``(gathered, t)`` with its own inline reward rules, so the two can
check each other.
"""
from __future__ import annotations

import math
from functools import lru_cache

from ..errors import BudgetExceeded
from .trajectory import Trajectory, rollout_actions
from .world import EnvState, ToolWorld, canonical_actions, reset, step

DEFAULT_BUDGET = 10**6


def oracle_search(world: ToolWorld, task_id: int, gamma: float = 1.0, alpha: float = 1.0,
                  budget: int = DEFAULT_BUDGET) -> tuple[float, Trajectory]:
    """Maximum discounted shaped return and one trajectory attaining it.

    Raises BudgetExceeded once more than ``budget`` complete sequences would
    be enumerated. Ties keep the first sequence found, and since Finish
    actions are tried first, that is the shortest one.
    """
    from ..reward import shape_rewards, step_reward

    task = world.task(task_id)
    best_value = -math.inf
    best_actions: list = []
    n_leaves = 0

    def visit(state, prefix, ret, disc):
        nonlocal best_value, best_actions, n_leaves
        for action in canonical_actions(world, state.gathered):
            nxt, obs = step(world, state, action)
            r = step_reward(world, task, state, action, obs, nxt, alpha).normalized
            value = ret + disc * r
            prefix.append(action)
            if nxt.done:
                n_leaves += 1
                if n_leaves > budget:
                    raise BudgetExceeded(f"more than {budget} action sequences for task {task_id}")
                if value > best_value:
                    best_value, best_actions = value, list(prefix)
            else:
                visit(nxt, prefix, value, disc * gamma)
            prefix.pop()

    visit(reset(world, task_id), [], 0.0, 1.0)
    traj = rollout_actions(world, task_id, best_actions)
    return best_value, traj.with_rewards(shape_rewards(world, traj, alpha))


def count_sequences(world: ToolWorld, task_id: int) -> int:
    """Number of sequences :func:`oracle_search` would enumerate."""

    @lru_cache(maxsize=None)
    def count(gathered, t):
        total = 0
        state = EnvState(task_id, t, gathered, (), False)
        for action in canonical_actions(world, gathered):
            nxt, _ = step(world, state, action)
            total += 1 if nxt.done else count(nxt.gathered, nxt.t)
        return total

    return count(frozenset(), 1)


def solve_dp(world: ToolWorld, task_id: int, gamma: float = 1.0, alpha: float = 1.0) -> tuple[float, list]:
    """Optimal discounted return by backward recursion over (gathered, t).

    Returns the value and the optimal action list. Rewards are computed
    here directly from the tool table rather than through the judges.
    """
    task = world.task(task_id)
    required = set(task.required_items)
    need = len(required)
    item_of = world.item_of_token
    valid = {(t.name, a): i for t in world.tools for a, i in t.yields.items()}

    def final_value(action, gathered):
        if not action.is_finish:
            return 0.0
        hits = len(required & {item_of[tok] for tok in action.answer} & gathered)
        if hits == need:
            return 1.0
        return 0.5 if hits >= -(-need // 2) else 0.0

    def mid_value(action, gathered):
        item = valid.get((action.tool, action.arg)) if action.is_call else None
        if item is None:
            return 0.0
        contribution = 5 if (item in required and item not in gathered) else 2
        return (alpha + contribution / 5) / (alpha + 1)

    @lru_cache(maxsize=None)
    def value(gathered, t):
        best, best_a, best_next = -math.inf, None, None
        for action in canonical_actions(world, gathered):
            item = valid.get((action.tool, action.arg)) if action.is_call else None
            after = gathered | {item} if item is not None else gathered
            if action.is_finish or t >= world.horizon:
                v, nxt = final_value(action, after), None
            else:
                v, nxt = mid_value(action, gathered) + gamma * value(after, t + 1)[0], (after, t + 1)
            if v > best:
                best, best_a, best_next = v, action, nxt
        return best, best_a, best_next

    actions = []
    key = (frozenset(), 1)
    total = value(*key)[0]
    while key is not None:
        _, a, key = value(*key)
        actions.append(a)
    return total, actions
