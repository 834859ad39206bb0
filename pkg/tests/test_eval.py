import math

import numpy as np
import pytest

from stepgrain.env import CALL, ARG, END, FINISH, generate_world, rollout_actions
from stepgrain.errors import NoIntermediateSteps, UnpairedTasks
from stepgrain import evaluation
from stepgrain.evaluation import (
    LexicographicJudge, pass_rate, rollout_dfs, rollout_sequential, status_of, tool_success_rate, win_rate,
)
from stepgrain.policy import init_policy, output_bias_slice
from stepgrain.reward import SOLVED, shape_rewards

from oracles import Enumerated, all_actions, tiny_config
from reward_table import producer, rejected_call


def finish_now_policy(world):
    """Greedy decoding emits FINISH END immediately."""
    p = init_policy(world, 4, 0, prior_strength=100.0, init_scale=0.0)
    th = p.theta.copy()
    sl = output_bias_slice(p.dims)
    idx = world.vocab.index
    th[sl.start + idx[FINISH]] = 10.0
    th[sl.start + idx[END]] = 5.0
    return p.with_theta(th)


def solved(world, task):
    return rollout_actions(world, task.id, [producer(world, i) for i in task.required_items]
                           + [(FINISH, *(world.item_token(i) for i in task.required_items), END)])


def unsolved(world, task, n_calls=1):
    return rollout_actions(world, task.id, [rejected_call(world)] * n_calls + [(FINISH,)])


# -- rollouts ---------------------------------------------------------------------

def test_greedy_rollout_deterministic(toy_world):
    p = init_policy(toy_world, 8, 0, 4.0, init_scale=0.5)
    a = rollout_sequential(toy_world, p, 0, greedy=True)
    b = rollout_sequential(toy_world, p, 0, greedy=True)
    assert [s.action for s in a.steps] == [s.action for s in b.steps]
    assert len(a) <= toy_world.horizon


def test_solve_probability_matches_enumeration(tiny_world):
    params = init_policy(tiny_world, 4, 0, prior_strength=3.0, init_scale=0.0)
    en = Enumerated(tiny_world, 0, lambda path: 0.0)
    task = tiny_world.tasks[0]
    hit = np.array([
        status_of(tiny_world, rollout_actions(tiny_world, 0, [a.tokens for _, a, _, _ in path])) == SOLVED
        for path in en.paths
    ])
    p = float(np.exp(en.log_probs(params))[hit].sum())
    n = 100_000
    rng = np.random.default_rng(0)
    count = sum(status_of(tiny_world, rollout_sequential(tiny_world, params, 0, rng)) == SOLVED for _ in range(n))
    assert abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    assert 0.001 < p < 0.999


def test_dfs_width_one_is_greedy(toy_world):
    p = init_policy(toy_world, 8, 1, 4.0, init_scale=0.5)
    for task in toy_world.tasks:
        g = rollout_sequential(toy_world, p, task.id, greedy=True)
        d = rollout_dfs(toy_world, p, task.id, width=1, budget=toy_world.horizon)
        assert [s.action for s in d.steps] == [s.action for s in g.steps]


def test_dfs_exhaustive_finds_solution(tiny_world):
    p = finish_now_policy(tiny_world)
    assert status_of(tiny_world, rollout_sequential(tiny_world, p, 0, greedy=True)) != SOLVED
    width = len(all_actions(tiny_world))
    traj = rollout_dfs(tiny_world, p, 0, width=width, budget=10**4)
    assert status_of(tiny_world, traj) == SOLVED


def test_dfs_budget_exhausted(toy_world):
    p = init_policy(toy_world, 8, 0, 4.0)
    traj = rollout_dfs(toy_world, p, 0, width=3, budget=1)
    assert traj.terminal and len(traj) <= toy_world.horizon
    with pytest.raises(ValueError):
        rollout_dfs(toy_world, p, 0, width=0)


# -- pass rate --------------------------------------------------------------------

def test_oracle_pass_rate(toy_world):
    report = pass_rate(toy_world, None, strategy="oracle")
    assert report.pass_rate == 1.0 and report.strategy == "oracle"


def test_finish_immediately_scores_zero(toy_world):
    report = pass_rate(toy_world, finish_now_policy(toy_world), greedy=True, n_runs=2)
    assert report.pass_rate == 0.0
    assert all(r["status"] == "Unsolved" and r["steps"] == 1 for t in report.per_task for r in t["runs"])


def test_pass_rate_aggregation(toy_world, monkeypatch):
    # task 0 runs: Solved, Unsure, Unsolved; task 1 runs: Solved, Solved, Unsolved
    t0, t1 = toy_world.tasks[0], toy_world.tasks[1]
    a, b, c = t0.required_items
    unsure0 = rollout_actions(toy_world, 0, [producer(toy_world, a), producer(toy_world, b),
                                             (FINISH, toy_world.item_token(a), toy_world.item_token(b))])
    table = {0: [solved(toy_world, t0), unsure0, unsolved(toy_world, t0)],
             1: [solved(toy_world, t1), solved(toy_world, t1), unsolved(toy_world, t1)]}
    calls = {0: 0, 1: 0}

    def fake(world, params, task_id, rng=None, greedy=False, temperature=1.0):
        k = calls[task_id]
        calls[task_id] += 1
        return table[task_id][k]

    monkeypatch.setattr(evaluation, "rollout_sequential", fake)
    report = pass_rate(toy_world, None, tasks=[0, 1], n_runs=3)
    assert report.run_pass_rates == [1.0, 0.75, 0.0]
    assert report.pass_rate == pytest.approx(7 / 12, abs=1e-15)
    assert report.pass_rate_std == pytest.approx(math.sqrt(39) / 12, abs=1e-15)
    assert [t["score"] for t in report.per_task] == [0.5, pytest.approx(2 / 3)]
    # aggregates are recomputable from the per-task records
    assert np.mean([t["score"] for t in report.per_task]) == pytest.approx(report.pass_rate)


def test_report_serializes(toy_world):
    import json

    report = pass_rate(toy_world, None, strategy="oracle")
    d = json.loads(report.to_json())
    assert d["strategy"] == "oracle" and "trajectories" not in d


# -- win rate and tool success ----------------------------------------------------

def test_win_rate(toy_world):
    judge = LexicographicJudge(toy_world)
    A = [solved(toy_world, t) for t in toy_world.tasks]
    B = [unsolved(toy_world, t) for t in toy_world.tasks]
    assert win_rate(A, A, judge) == 0.5
    assert win_rate(A, B, judge) == 1.0
    # mixed: tasks 0-1 A wins on status, 2 B shorter with equal status, 3-5 ties
    mixed_a = [solved(toy_world, toy_world.tasks[0]), solved(toy_world, toy_world.tasks[1]),
               unsolved(toy_world, toy_world.tasks[2], 3)] + [unsolved(toy_world, t) for t in toy_world.tasks[3:]]
    mixed_b = [unsolved(toy_world, toy_world.tasks[0]), unsolved(toy_world, toy_world.tasks[1]),
               unsolved(toy_world, toy_world.tasks[2], 1)] + [unsolved(toy_world, t) for t in toy_world.tasks[3:]]
    assert win_rate(mixed_a, mixed_b, judge) == pytest.approx((1 + 1 + 0 + 0.5 * 3) / 6)
    assert win_rate(mixed_a, mixed_b, judge) + win_rate(mixed_b, mixed_a, judge) == pytest.approx(1.0)
    with pytest.raises(UnpairedTasks):
        win_rate(A[:2], B[:3], judge)


def test_tool_success_rate(toy_world):
    t = toy_world.tasks[0]
    ok = solved(toy_world, t)
    bad = rollout_actions(toy_world, t.id, [(ARG, CALL)] * 3 + [(FINISH,)])
    mix = rollout_actions(toy_world, t.id, [producer(toy_world, i) for i in t.required_items]
                          + [(END,), (FINISH,)])
    ann = lambda tr: tr.with_rewards(shape_rewards(toy_world, tr))
    assert tool_success_rate([ann(ok)]) == 1.0
    assert tool_success_rate([ann(bad)]) == 0.0
    assert tool_success_rate([ann(mix)]) == 0.75
    assert tool_success_rate([ann(ok), ann(bad)]) == tool_success_rate([ann(bad), ann(ok)])
    assert tool_success_rate([mix], toy_world) == 0.75
    with pytest.raises(NoIntermediateSteps):
        tool_success_rate([ann(unsolved(toy_world, t, 0))])
