"""Step-grained reward shaping.

Intermediate steps are scored by two judges, SuccCalling (0/1) and
Contribution (0..5). The final step is scored by IsSolved. Both are mapped to
[0, 1]::

    r_t = (alpha * sc_t + contribution_t / 5) / (alpha + 1)    t < T
    r_T = {"Unsolved": 0, "Unsure": 0.5, "Solved": 1}[status]

The rule-based judges below read the simulated world. External judges speak
the JSON schema of :data:`PROMPT_TEMPLATE` and go through
:func:`parse_annotation_response` / :func:`apply_annotation`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

from .env.trajectory import Trajectory
from .env.world import ERROR_OBS, MALFORMED_OBS, Action, EnvState, ObservationRecord, Task, ToolWorld
from .errors import (
    FinalStepNotApplicable,
    IndexOutOfRange,
    LengthMismatch,
    NonTerminalTrajectory,
    SchemaError,
)

UNSOLVED, UNSURE, SOLVED = "Unsolved", "Unsure", "Solved"
STATUSES = (UNSOLVED, UNSURE, SOLVED)
STATUS_VALUE = {UNSOLVED: 0.0, UNSURE: 0.5, SOLVED: 1.0}
STATUS_RANK = {UNSOLVED: 0, UNSURE: 1, SOLVED: 2}

CONTRIB_FAILED, CONTRIB_REDUNDANT, CONTRIB_NOVEL = 0, 2, 5
MAX_CONTRIBUTION = 5

ABLATION_MODES = ("none", "zero_step_rewards", "sub_trajectory_ppo")


@dataclass(frozen=True)
class StepReward:
    succ_calling: int | None
    contribution: int | None
    is_solved: str | None
    normalized: float

    @property
    def is_final(self) -> bool:
        return self.is_solved is not None


def intermediate_reward(succ_calling: int, contribution: int, alpha: float) -> float:
    """Normalized reward of a non-final step, correctly rounded.

    Evaluated in rational arithmetic so that hand-computed tables match
    bit for bit.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    a = Fraction(alpha)
    value = (a * succ_calling + Fraction(contribution, MAX_CONTRIBUTION)) / (a + 1)
    return float(value)


def final_reward(status: str) -> float:
    return STATUS_VALUE[status]


# -- rule-based judges --------------------------------------------------------

def judge_succ_calling(world: ToolWorld, action: Action, next_obs) -> int:
    """1 iff ``action`` is a call that the tool executed successfully."""
    if action.is_finish:
        raise FinalStepNotApplicable("SuccCalling does not score Finish steps")
    if not action.is_call:
        return 0
    tokens = next_obs.tokens if isinstance(next_obs, ObservationRecord) else tuple(next_obs)
    if not tokens or tokens[0] in (ERROR_OBS, MALFORMED_OBS):
        return 0
    tool = world.tool_by_name.get(action.tool)
    if tool is None or tokens[0] == tool.error_obs:
        return 0
    return 1


def contribution_rule(task: Task, before: frozenset, after: frozenset, succ: int) -> int:
    if not succ:
        return CONTRIB_FAILED
    new = after - before
    if new & task.required:
        return CONTRIB_NOVEL
    return CONTRIB_REDUNDANT


def judge_contribution(world: ToolWorld, trajectory: Trajectory, t: int) -> int:
    """Contribution of step ``t`` (1-based, ``t < T``) on the 0..5 scale.

    5 for the first retrieval of a required item, 2 for a successful but
    redundant or irrelevant call, 0 for a failed or malformed one.
    """
    if not 1 <= t <= len(trajectory) - 1:
        raise IndexOutOfRange(f"step {t} is not an intermediate step of a {len(trajectory)}-step trajectory")
    s = trajectory.steps[t - 1]
    succ = judge_succ_calling(world, s.action, s.observation)
    task = world.task(trajectory.task_id)
    return contribution_rule(task, s.state.gathered, s.next_state.gathered, succ)


def judge_is_solved(world: ToolWorld, task: Task, final_action: Action | None, gathered=frozenset()) -> str:
    """Status of the final answer.

    An item counts as referenced only if it was actually gathered: answering
    with an item the agent never retrieved is a hallucination. ``Solved``
    needs every required item, ``Unsure`` at least half of them (rounded up).
    Anything but a Finish action (e.g. a horizon overflow) is ``Unsolved``.
    """
    if final_action is None or not final_action.is_finish:
        return UNSOLVED
    referenced = {world.item_of_token[tok] for tok in final_action.answer}
    hits = len(task.required & referenced & set(gathered))
    need = len(task.required)
    if hits == need:
        return SOLVED
    if hits >= math.ceil(need / 2):
        return UNSURE
    return UNSOLVED


def step_reward(
    world: ToolWorld,
    task: Task,
    state: EnvState,
    action: Action,
    obs: ObservationRecord,
    next_state: EnvState,
    alpha: float,
) -> StepReward:
    """Oracle reward of one step; final when ``next_state.done``."""
    if next_state.done:
        status = judge_is_solved(world, task, action, next_state.gathered)
        return StepReward(None, None, status, final_reward(status))
    sc = judge_succ_calling(world, action, obs)
    con = contribution_rule(task, state.gathered, next_state.gathered, sc)
    return StepReward(sc, con, None, intermediate_reward(sc, con, alpha))


def _check_ablation(ablation: str) -> None:
    if ablation not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {ablation!r}")


def shape_rewards(world: ToolWorld, trajectory: Trajectory, alpha: float = 1.0, ablation: str = "none") -> list[StepReward]:
    """Oracle step rewards for a terminal trajectory.

    With ``ablation="zero_step_rewards"`` every intermediate normalized
    reward is 0 while the judge fields and the final reward are kept.
    """
    _check_ablation(ablation)
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    trajectory.require_terminal()
    task = world.task(trajectory.task_id)
    rewards = []
    for s in trajectory.steps:
        rewards.append(step_reward(world, task, s.state, s.action, s.observation, s.next_state, alpha))
    return _ablate(rewards, ablation)


def _ablate(rewards: list[StepReward], ablation: str) -> list[StepReward]:
    if ablation != "zero_step_rewards":
        return rewards
    return [r if r.is_final else StepReward(r.succ_calling, r.contribution, None, 0.0) for r in rewards]


# -- external judge wire format ----------------------------------------------

PROMPT_TEMPLATE = """Query:
{query}

Intermediate Steps:
{mid_steps}
Final Answer:
{final_answer}

Given the above query, all intermediate steps and the final answer, you need to evaluate the entire task-solving process by following rules:
(1) **Successful Tool Calling:** For each intermediate step, determine if a tool was called successfully and give a score of 0 (no) or 1 (yes).
(2) **Contribution to Final Answer:** For each intermediate step, rate its contribution to the final answer on a scale from 0 to 5.
(3) **Final Answer Status:** Determine if the final answer is "Solved", "Unsure", or "Unsolved".

Now provide your evaluation in JSON format with the parameters of "succeed_tool_calling", "contribution_to_final_answer" and "final_answer_status" to the function "evaluate_process_reward".
"""

RESPONSE_FIELDS = ("succeed_tool_calling", "contribution_to_final_answer", "final_answer_status")


@dataclass(frozen=True)
class AnnotationRecord:
    query: str
    steps: tuple[tuple[str, str], ...]
    final_answer: str
    succeed_tool_calling: tuple[int, ...]
    contribution_to_final_answer: tuple[int, ...]
    final_answer_status: str


def render_query(task: Task) -> str:
    return " ".join(task.query_tokens)


def render_steps(trajectory: Trajectory) -> list[tuple[str, str]]:
    return [
        (" ".join(s.action.tokens), " ".join(s.observation.tokens))
        for s in trajectory.steps[:-1]
    ]


def render_final(trajectory: Trajectory) -> str:
    final = trajectory.final_action
    return " ".join(final.tokens) if final.is_finish else ""


def response_schema(n_intermediate: int) -> dict:
    """JSON-schema descriptor of a valid judge response."""
    return {
        "type": "object",
        "additionalProperties": False,
        "required": list(RESPONSE_FIELDS),
        "properties": {
            "succeed_tool_calling": {
                "type": "array",
                "items": {"type": "integer", "enum": [0, 1]},
                "minItems": n_intermediate,
                "maxItems": n_intermediate,
            },
            "contribution_to_final_answer": {
                "type": "array",
                "items": {"type": "integer", "minimum": 0, "maximum": MAX_CONTRIBUTION},
                "minItems": n_intermediate,
                "maxItems": n_intermediate,
            },
            "final_answer_status": {"type": "string", "enum": list(STATUSES)},
        },
    }


def serialize_annotation_request(trajectory: Trajectory, world: ToolWorld) -> tuple[str, dict]:
    """Render the judge prompt for a terminal trajectory plus its response schema."""
    trajectory.require_terminal()
    task = world.task(trajectory.task_id)
    mid = "\n".join(
        f"Step {k}: {action} -> {obs}" for k, (action, obs) in enumerate(render_steps(trajectory), start=1)
    )
    prompt = PROMPT_TEMPLATE.format(
        query=render_query(task), mid_steps=mid, final_answer=render_final(trajectory)
    )
    return prompt, response_schema(len(trajectory) - 1)


def _int_list(value, name, low, high, line):
    if not isinstance(value, list):
        raise SchemaError(f"{name} must be a list", line)
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError(f"{name} entries must be integers, got {v!r}", line)
        if not low <= v <= high:
            raise SchemaError(f"{name} entry {v} outside [{low}, {high}]", line)
        out.append(v)
    return tuple(out)


def parse_annotation_response(
    response, trajectory: Trajectory | None = None, world: ToolWorld | None = None, line: int | None = None
) -> AnnotationRecord:
    """Validate a judge response (JSON text or dict) into an AnnotationRecord.

    When ``trajectory`` and ``world`` are given the record carries the
    renderings of that trajectory and list lengths are checked against it.
    """
    if isinstance(response, (str, bytes)):
        try:
            response = json.loads(response)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"response is not JSON: {exc}", line) from None
    if not isinstance(response, Mapping):
        raise SchemaError("response must be a JSON object", line)
    keys = set(response)
    if keys != set(RESPONSE_FIELDS):
        missing = sorted(set(RESPONSE_FIELDS) - keys)
        extra = sorted(keys - set(RESPONSE_FIELDS))
        raise SchemaError(f"response fields mismatch (missing={missing}, unexpected={extra})", line)
    sc = _int_list(response["succeed_tool_calling"], "succeed_tool_calling", 0, 1, line)
    con = _int_list(response["contribution_to_final_answer"], "contribution_to_final_answer", 0, MAX_CONTRIBUTION, line)
    status = response["final_answer_status"]
    if status not in STATUSES:
        raise SchemaError(f"final_answer_status {status!r} not in {STATUSES}", line)
    if len(sc) != len(con):
        raise LengthMismatch("succeed_tool_calling and contribution_to_final_answer differ in length")
    query, steps, final = "", (), ""
    if trajectory is not None and world is not None:
        if len(sc) != len(trajectory) - 1:
            raise LengthMismatch(f"expected {len(trajectory) - 1} intermediate scores, got {len(sc)}")
        query = render_query(world.task(trajectory.task_id))
        steps = tuple(render_steps(trajectory))
        final = render_final(trajectory)
    return AnnotationRecord(query, steps, final, sc, con, status)


def oracle_annotation(world: ToolWorld, trajectory: Trajectory) -> AnnotationRecord:
    """The record the rule-based judges would return."""
    rewards = shape_rewards(world, trajectory, 1.0)
    return AnnotationRecord(
        query=render_query(world.task(trajectory.task_id)),
        steps=tuple(render_steps(trajectory)),
        final_answer=render_final(trajectory),
        succeed_tool_calling=tuple(r.succ_calling for r in rewards[:-1]),
        contribution_to_final_answer=tuple(r.contribution for r in rewards[:-1]),
        final_answer_status=rewards[-1].is_solved,
    )


def record_to_response(record: AnnotationRecord) -> dict:
    return {
        "succeed_tool_calling": list(record.succeed_tool_calling),
        "contribution_to_final_answer": list(record.contribution_to_final_answer),
        "final_answer_status": record.final_answer_status,
    }


def apply_annotation(trajectory: Trajectory, record: AnnotationRecord, alpha: float = 1.0, ablation: str = "none") -> Trajectory:
    """Attach rewards computed from an annotation record."""
    _check_ablation(ablation)
    trajectory.require_terminal()
    n = len(trajectory) - 1
    if len(record.succeed_tool_calling) != n or len(record.contribution_to_final_answer) != n:
        raise LengthMismatch(f"record scores {len(record.succeed_tool_calling)} steps, trajectory has {n} intermediate")
    for v in record.succeed_tool_calling:
        if v not in (0, 1):
            raise SchemaError(f"succeed_tool_calling entry {v!r} is not 0/1")
    for v in record.contribution_to_final_answer:
        if not (isinstance(v, int) and 0 <= v <= MAX_CONTRIBUTION):
            raise SchemaError(f"contribution entry {v!r} outside 0..{MAX_CONTRIBUTION}")
    if record.final_answer_status not in STATUSES:
        raise SchemaError(f"unknown status {record.final_answer_status!r}")
    rewards = [
        StepReward(sc, con, None, intermediate_reward(sc, con, alpha))
        for sc, con in zip(record.succeed_tool_calling, record.contribution_to_final_answer)
    ]
    status = record.final_answer_status
    rewards.append(StepReward(None, None, status, final_reward(status)))
    return trajectory.with_rewards(_ablate(rewards, ablation))


def annotate(world: ToolWorld, trajectory: Trajectory, alpha: float = 1.0, judge: Callable | None = None) -> Trajectory:
    """Annotate with the oracle, or with ``judge(prompt, schema) -> JSON`` if given."""
    if judge is None:
        return trajectory.with_rewards(shape_rewards(world, trajectory, alpha))
    prompt, schema = serialize_annotation_request(trajectory, world)
    record = parse_annotation_response(judge(prompt, schema), trajectory, world)
    return apply_annotation(trajectory, record, alpha)


def annotated_record(trajectory: Trajectory, alpha: float) -> dict:
    """One JSONL line of an annotated trajectory."""
    if trajectory.rewards is None:
        raise NonTerminalTrajectory("trajectory carries no rewards")
    steps = []
    for s, r in zip(trajectory.steps, trajectory.rewards):
        steps.append(
            {
                "action_tokens": list(s.action.tokens),
                "obs_tokens": list(s.observation.tokens),
                "old_logprobs": None if s.logprobs is None else list(s.logprobs),
                "sc": r.succ_calling,
                "contribution": r.contribution,
            }
        )
    final = trajectory.final_action
    return {
        "task_id": trajectory.task_id,
        "steps": steps,
        "final": {
            "answer_tokens": list(final.answer) if final.is_finish else [],
            "status": trajectory.rewards[-1].is_solved,
        },
        "alpha": alpha,
        "normalized_rewards": [r.normalized for r in trajectory.rewards],
    }
