"""Evaluation: rollout strategies, pass rate, win rate, tool success rate."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .env.search import solve_dp
from .env.trajectory import Step, Trajectory, rollout_actions
from .env.world import OPEN, ToolWorld, parse_action, prefix_status, reset, step
from .errors import NoIntermediateSteps, UnpairedTasks
from .policy import PolicyParams, feature_layout, featurize, forward, sample_action
from .reward import (
    SOLVED,
    STATUS_RANK,
    STATUS_VALUE,
    judge_is_solved,
    judge_succ_calling,
    shape_rewards,
)

STRATEGIES = ("sequential", "dfs", "oracle")


def rollout_sequential(world: ToolWorld, params: PolicyParams, task_id: int, rng: np.random.Generator | None = None,
                       greedy: bool = False, temperature: float = 1.0) -> Trajectory:
    """Decode actions one after another until the episode ends."""
    state = reset(world, task_id)
    steps = []
    while not state.done:
        action, logprobs = sample_action(params, world, state, rng, temperature, greedy)
        nxt, obs = step(world, state, action)
        steps.append(Step(state, action, obs, nxt, tuple(logprobs.tolist())))
        state = nxt
    return Trajectory(task_id=task_id, steps=tuple(steps), terminal=True)


def status_of(world: ToolWorld, traj: Trajectory) -> str:
    return judge_is_solved(world, world.task(traj.task_id), traj.final_action, traj.final_state.gathered)


def solved_score(status: str, unsure_credit: float = 0.5) -> float:
    """Solved 1, Unsure ``unsure_credit``, Unsolved 0."""
    if status == SOLVED:
        return 1.0
    return unsure_credit if status == "Unsure" else 0.0


def greedy_pass_rate(world: ToolWorld, params: PolicyParams, unsure_credit: float = 0.5) -> float:
    scores = [
        solved_score(status_of(world, rollout_sequential(world, params, t.id, greedy=True)), unsure_credit)
        for t in world.tasks
    ]
    return float(np.mean(scores))


# -- depth-first search ---------------------------------------------------------

def top_actions(params: PolicyParams, world: ToolWorld, state, width: int) -> list:
    """Highest-probability complete actions, by beam search of size ``width``."""
    layout = feature_layout(world)
    vocab = world.vocab
    beams = [(0.0, ())]
    finished = []
    while beams:
        X = np.stack([featurize(world, state, p, layout) for _, p in beams])
        _, logp = forward(params, X)
        candidates = []
        for (score, prefix), lp in zip(beams, logp):
            for k in np.argsort(-lp, kind="stable")[:width]:
                candidates.append((score + lp[k], prefix + (vocab.tokens[k],)))
        candidates.sort(key=lambda c: -c[0])
        beams = []
        for score, prefix in candidates:
            if prefix_status(vocab, prefix, world.max_action_len) == OPEN:
                if len(beams) < width:
                    beams.append((score, prefix))
            else:
                finished.append((score, prefix))
        finished.sort(key=lambda c: -c[0])
        finished = finished[:width]
        if len(finished) == width and beams and beams[0][0] <= finished[-1][0]:
            break
    return [parse_action(vocab, p) for _, p in finished]


def rollout_dfs(world: ToolWorld, params: PolicyParams, task_id: int, width: int = 3, budget: int = 24,
                alpha: float = 1.0) -> Trajectory:
    """Depth-first search over candidate actions with backtracking.

    The children of a node are the greedy action followed by the best other
    beam-search actions, ``width`` in total, so the first path explored is
    the greedy rollout. Each node expansion costs one unit of ``budget``.
    The search stops at the first Solved trajectory. Otherwise it returns
    the best one found, ranked by status, then shaped return, then order of
    discovery. If the budget runs out before any episode ends, the current
    path is finished greedily.
    """
    if width < 1 or budget < 1:
        raise ValueError("width and budget must be positive")
    expansions = 0
    best = None
    found = 0

    def consider(traj):
        nonlocal best, found
        status = status_of(world, traj)
        ret = sum(r.normalized for r in shape_rewards(world, traj, alpha))
        key = (STATUS_RANK[status], ret, -found)
        found += 1
        if best is None or key > best[0]:
            best = (key, traj)
        return status == SOLVED

    def make_step(state, action):
        from .policy import action_logprob

        nxt, obs = step(world, state, action)
        _, lp = action_logprob(params, world, state, action)
        return Step(state, action, obs, nxt, tuple(lp.tolist())), nxt

    def children(state):
        greedy, _ = sample_action(params, world, state, greedy=True)
        out = [greedy]
        if width > 1:
            for a in top_actions(params, world, state, width):
                if a.tokens != greedy.tokens:
                    out.append(a)
        return out[:width]

    def visit(state, path):
        nonlocal expansions
        if expansions >= budget:
            if best is None:
                s, tail = state, list(path)
                while not s.done:
                    a, _ = sample_action(params, world, s, greedy=True)
                    st, s = make_step(s, a)
                    tail.append(st)
                consider(Trajectory(task_id, tuple(tail)))
            return False
        expansions += 1
        for action in children(state):
            st, nxt = make_step(state, action)
            path.append(st)
            if nxt.done:
                hit = consider(Trajectory(task_id, tuple(path)))
            else:
                hit = visit(nxt, path)
            path.pop()
            if hit:
                return True
            if expansions >= budget and best is not None:
                return False
        return False

    visit(reset(world, task_id), [])
    return best[1]


def oracle_trajectory(world: ToolWorld, task_id: int, gamma: float = 0.99, alpha: float = 1.0) -> Trajectory:
    _, actions = solve_dp(world, task_id, gamma, alpha)
    return rollout_actions(world, task_id, actions)


# -- metrics ---------------------------------------------------------------------

@dataclass
class EvalReport:
    strategy: str
    n_runs: int
    pass_rate: float
    pass_rate_std: float
    tool_success_rate: float
    per_task: list
    per_subset: dict
    run_pass_rates: list
    trajectories: list = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "trajectories"}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def tool_success_rate(trajectories: Sequence[Trajectory], world: ToolWorld | None = None) -> float:
    """Fraction of successful calls over all intermediate (non-final) steps."""
    total = count = 0
    for tr in trajectories:
        if tr.rewards is not None:
            scores = [r.succ_calling for r in tr.rewards[:-1]]
        elif world is not None:
            scores = [judge_succ_calling(world, s.action, s.observation) for s in tr.steps[:-1]]
        else:
            raise ValueError("trajectories carry no SuccCalling annotations and no world was given")
        total += sum(scores)
        count += len(scores)
    if count == 0:
        raise NoIntermediateSteps("no intermediate steps to score")
    return total / count


def pass_rate(world: ToolWorld, params: PolicyParams | None, tasks=None, strategy: str = "sequential", n_runs: int = 1,
              rng: np.random.Generator | None = None, greedy: bool = False, width: int = 3, budget: int = 24,
              unsure_credit: float = 0.5, alpha: float = 1.0) -> EvalReport:
    """Roll every task out ``n_runs`` times and aggregate.

    The task score is the mean solved indicator over runs (Unsure earns
    ``unsure_credit``). ``pass_rate`` is the mean over runs of the per-run
    mean over tasks and ``pass_rate_std`` its sample standard deviation.
    Subsets group tasks by the number of required items.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if tasks is None:
        tasks = [t.id for t in world.tasks]
    rng = rng if rng is not None else np.random.default_rng(0)
    streams = rng.spawn(n_runs * len(tasks))
    runs = np.zeros((n_runs, len(tasks)))
    records, all_trajs = [], []
    for j, task_id in enumerate(tasks):
        outcomes = []
        for r in range(n_runs):
            if strategy == "oracle":
                traj = oracle_trajectory(world, task_id, alpha=alpha)
            elif strategy == "dfs":
                traj = rollout_dfs(world, params, task_id, width, budget, alpha)
            else:
                traj = rollout_sequential(world, params, task_id, streams[j * n_runs + r], greedy=greedy)
            traj = traj.with_rewards(shape_rewards(world, traj, alpha))
            all_trajs.append(traj)
            status = traj.rewards[-1].is_solved
            runs[r, j] = solved_score(status, unsure_credit)
            sc = [x.succ_calling for x in traj.rewards[:-1]]
            outcomes.append({"status": status, "steps": len(traj), "call_successes": int(sum(sc)), "call_attempts": len(sc)})
        records.append({"task_id": int(task_id), "score": float(runs[:, j].mean()), "runs": outcomes})
    run_rates = runs.mean(axis=1)
    subsets = defaultdict(list)
    for rec in records:
        subsets[f"items={len(world.task(rec['task_id']).required_items)}"].append(rec["score"])
    try:
        tsr = tool_success_rate(all_trajs)
    except NoIntermediateSteps:
        tsr = 0.0
    return EvalReport(
        strategy=strategy,
        n_runs=n_runs,
        pass_rate=float(run_rates.mean()),
        pass_rate_std=float(run_rates.std(ddof=1)) if n_runs > 1 else 0.0,
        tool_success_rate=float(tsr),
        per_task=records,
        per_subset={k: float(np.mean(v)) for k, v in sorted(subsets.items())},
        run_pass_rates=[float(x) for x in run_rates],
        trajectories=all_trajs,
    )


class LexicographicJudge:
    """Higher final status wins, then fewer steps; otherwise a tie.

    Returns 1.0 if the first trajectory wins, 0.0 if the second does, and
    0.5 for a tie.
    """

    def __init__(self, world: ToolWorld):
        self.world = world

    def __call__(self, a: Trajectory, b: Trajectory) -> float:
        ra = STATUS_RANK[status_of(self.world, a)]
        rb = STATUS_RANK[status_of(self.world, b)]
        if ra != rb:
            return 1.0 if ra > rb else 0.0
        if len(a) != len(b):
            return 1.0 if len(a) < len(b) else 0.0
        return 0.5


def win_rate(trajectories_a: Sequence[Trajectory], trajectories_b: Sequence[Trajectory], judge: Callable) -> float:
    """Fraction of task-paired comparisons won by A (ties count one half)."""
    by_task_a, by_task_b = defaultdict(list), defaultdict(list)
    for tr in trajectories_a:
        by_task_a[tr.task_id].append(tr)
    for tr in trajectories_b:
        by_task_b[tr.task_id].append(tr)
    if set(by_task_a) != set(by_task_b) or any(len(by_task_a[k]) != len(by_task_b[k]) for k in by_task_a):
        raise UnpairedTasks("trajectory sets do not pair up by task id")
    scores = [judge(a, b) for k in sorted(by_task_a) for a, b in zip(by_task_a[k], by_task_b[k])]
    if not scores:
        raise UnpairedTasks("no trajectories to compare")
    return float(np.mean(scores))
