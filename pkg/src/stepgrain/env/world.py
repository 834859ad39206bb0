"""Procedurally generated information-gathering tool world.

A world holds a handful of tools. Each tool accepts a few argument tokens and
returns one InfoItem per accepted argument. A task lists the InfoItems its
final answer must reference. The agent gathers them through tool calls and
then emits ``FINISH`` followed by the answer tokens of the gathered items.

Everything here is pure: the world is immutable after generation, states are
values, and :func:`step` depends only on ``(world, state, action)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError, EpisodeFinished, UnknownTask, UnknownToken

CALL, ARG, END, FINISH = "CALL", "ARG", "END", "FINISH"
STRUCTURAL = (CALL, ARG, END, FINISH)
ERROR_OBS = "ERR"
MALFORMED_OBS = "BADFMT"

# Grammar slots of an unfinished action prefix.
SLOT_START, SLOT_NAME, SLOT_ARGKW, SLOT_ARGVAL, SLOT_CALLEND, SLOT_ANSWER = range(6)
N_SLOTS = 6

OPEN, COMPLETE, DEAD = "open", "complete", "dead"


@dataclass(frozen=True)
class Vocab:
    """Token inventory split into named sections.

    Token order (and therefore token ids) is structural, tools, args,
    answers, observations.
    """

    tools: tuple[str, ...]
    args: tuple[str, ...]
    answers: tuple[str, ...]
    observations: tuple[str, ...]
    structural: tuple[str, ...] = STRUCTURAL

    @cached_property
    def tokens(self) -> tuple[str, ...]:
        return self.structural + self.tools + self.args + self.answers + self.observations

    @cached_property
    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    @cached_property
    def tool_set(self) -> frozenset[str]:
        return frozenset(self.tools)

    @cached_property
    def arg_set(self) -> frozenset[str]:
        return frozenset(self.args)

    @cached_property
    def answer_set(self) -> frozenset[str]:
        return frozenset(self.answers)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.index[tok] for tok in tokens]
        except KeyError as exc:
            raise UnknownToken(f"token {exc.args[0]!r} not in vocabulary") from None

    def slot_tokens(self, slot: int) -> tuple[str, ...]:
        """Tokens that keep a prefix in ``slot`` grammatical."""
        return {
            SLOT_START: (CALL, FINISH),
            SLOT_NAME: self.tools,
            SLOT_ARGKW: (ARG,),
            SLOT_ARGVAL: self.args,
            SLOT_CALLEND: (END,),
            SLOT_ANSWER: self.answers + (END,),
        }[slot]

    def to_dict(self) -> dict:
        return {
            "structural": list(self.structural),
            "tools": list(self.tools),
            "args": list(self.args),
            "answers": list(self.answers),
            "observations": list(self.observations),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocab":
        return cls(
            tools=tuple(d["tools"]),
            args=tuple(d["args"]),
            answers=tuple(d["answers"]),
            observations=tuple(d["observations"]),
            structural=tuple(d.get("structural", STRUCTURAL)),
        )


@dataclass(frozen=True)
class ToolSpec:
    name: str
    accepted_args: tuple[str, ...]
    yields: Mapping[str, int]
    error_obs: str = ERROR_OBS

    def __post_init__(self):
        if not self.accepted_args:
            raise ConfigError(f"tool {self.name} accepts no arguments")
        if not set(self.yields) <= set(self.accepted_args):
            raise ConfigError(f"tool {self.name} yields items for unaccepted args")


@dataclass(frozen=True)
class Task:
    id: int
    query_tokens: tuple[str, ...]
    required_items: tuple[int, ...]
    distractor_hint: tuple[str, ...] = ()

    @cached_property
    def required(self) -> frozenset[int]:
        return frozenset(self.required_items)


@dataclass(frozen=True)
class WorldConfig:
    """Knobs of :func:`generate_world`.

    ``min_items``/``max_items`` bound the number of required InfoItems per
    task. ``distractor_ratio`` is the number of irrelevant tools listed in a
    task's candidate set per relevant tool (capped by the tools available).
    ``obs_noise`` is the probability that a valid call returns the error
    observation; 0 gives deterministic transitions.
    """

    n_tools: int = 5
    n_tasks: int = 6
    min_items: int = 2
    max_items: int = 3
    horizon: int = 6
    n_arg_tokens: int = 3
    args_per_tool: int = 2
    distractor_ratio: int = 2
    max_action_len: int = 6
    obs_noise: float = 0.0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("distractor_ratio", "obs_noise"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be non-negative, got {v}")
            elif v <= 0:
                raise ConfigError(f"{f.name} must be positive, got {v}")
        if self.min_items > self.max_items:
            raise ConfigError("min_items exceeds max_items")
        if self.args_per_tool > self.n_arg_tokens:
            raise ConfigError("args_per_tool exceeds n_arg_tokens")
        if self.n_tools < self.max_items:
            raise ConfigError("n_tools must be at least max_items")
        if self.max_items > self.n_tools * self.args_per_tool:
            raise ConfigError("max_items exceeds the number of distinct InfoItems")
        if self.max_action_len < 5:
            raise ConfigError("max_action_len must fit CALL name ARG arg END")
        if self.obs_noise >= 1:
            raise ConfigError("obs_noise must be below 1")


@dataclass(frozen=True)
class ToolWorld:
    tools: tuple[ToolSpec, ...]
    tasks: tuple[Task, ...]
    vocab: Vocab
    horizon: int
    seed: int
    max_action_len: int = 6
    obs_noise: float = 0.0

    @cached_property
    def tool_by_name(self) -> dict[str, ToolSpec]:
        return {t.name: t for t in self.tools}

    @property
    def n_items(self) -> int:
        return len(self.vocab.answers)

    def task(self, task_id) -> Task:
        if isinstance(task_id, (int, np.integer)) and 0 <= task_id < len(self.tasks):
            return self.tasks[int(task_id)]
        raise UnknownTask(f"unknown task id {task_id!r}")

    def item_token(self, item: int) -> str:
        return self.vocab.answers[item]

    @cached_property
    def item_of_token(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.vocab.answers)}

    def to_dict(self) -> dict:
        return {
            "tools": [
                {
                    "name": t.name,
                    "accepted_args": list(t.accepted_args),
                    "yields": dict(t.yields),
                    "error_obs": t.error_obs,
                }
                for t in self.tools
            ],
            "tasks": [
                {
                    "id": t.id,
                    "query_tokens": list(t.query_tokens),
                    "required_items": list(t.required_items),
                    "distractor_hint": list(t.distractor_hint),
                }
                for t in self.tasks
            ],
            "vocab": self.vocab.to_dict(),
            "horizon": self.horizon,
            "seed": self.seed,
            "max_action_len": self.max_action_len,
            "obs_noise": self.obs_noise,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "ToolWorld":
        tools = tuple(
            ToolSpec(
                name=t["name"],
                accepted_args=tuple(t["accepted_args"]),
                yields={k: int(v) for k, v in t["yields"].items()},
                error_obs=t.get("error_obs", ERROR_OBS),
            )
            for t in d["tools"]
        )
        tasks = tuple(
            Task(
                id=int(t["id"]),
                query_tokens=tuple(t["query_tokens"]),
                required_items=tuple(int(i) for i in t["required_items"]),
                distractor_hint=tuple(t.get("distractor_hint", ())),
            )
            for t in d["tasks"]
        )
        world = cls(
            tools=tools,
            tasks=tasks,
            vocab=Vocab.from_dict(d["vocab"]),
            horizon=int(d["horizon"]),
            seed=int(d["seed"]),
            max_action_len=int(d.get("max_action_len", 6)),
            obs_noise=float(d.get("obs_noise", 0.0)),
        )
        check_world(world)
        return world

    @classmethod
    def from_json(cls, text: str) -> "ToolWorld":
        return cls.from_dict(json.loads(text))


def check_world(world: ToolWorld) -> None:
    """Raise ConfigError unless every ToolWorld invariant holds."""
    vocab = world.vocab
    if len(set(vocab.tokens)) != len(vocab.tokens):
        raise ConfigError("duplicate tokens in vocabulary")
    names = [t.name for t in world.tools]
    if len(set(names)) != len(names):
        raise ConfigError("tool names are not unique")
    if world.horizon < 1:
        raise ConfigError("horizon must be positive")
    for tool in world.tools:
        referenced = [tool.name, tool.error_obs, *tool.accepted_args]
        if any(tok not in vocab for tok in referenced):
            raise ConfigError(f"tool {tool.name} references tokens outside the vocabulary")
        if any(not 0 <= i < world.n_items for i in tool.yields.values()):
            raise ConfigError(f"tool {tool.name} yields an unknown item")
    reachable = {i for tool in world.tools for i in tool.yields.values()}
    solvable = 0
    for task in world.tasks:
        if any(tok not in vocab for tok in (*task.query_tokens, *task.distractor_hint)):
            raise ConfigError(f"task {task.id} references tokens outside the vocabulary")
        if not task.required_items:
            raise ConfigError(f"task {task.id} requires no items")
        if len(task.required_items) > world.horizon - 1:
            raise ConfigError(f"task {task.id} cannot be solved within horizon {world.horizon}")
        if set(task.required_items) <= reachable:
            solvable += 1
    if world.tasks and not solvable:
        raise ConfigError("no task is solvable")


def generate_world(config: WorldConfig, seed: int) -> ToolWorld:
    """Build a world deterministically from ``(config, seed)``."""
    config.validate()
    if config.max_items > config.horizon - 1:
        raise ConfigError(
            f"tasks with {config.max_items} required items are unsolvable within "
            f"horizon {config.horizon}"
        )
    rng = np.random.default_rng(seed)
    tool_names = tuple(f"tool{k}" for k in range(config.n_tools))
    arg_tokens = tuple(f"arg{k}" for k in range(config.n_arg_tokens))

    tools = []
    item = 0
    for name in tool_names:
        picked = np.sort(rng.choice(config.n_arg_tokens, config.args_per_tool, replace=False))
        accepted = tuple(arg_tokens[k] for k in picked)
        yields = {}
        for a in accepted:
            yields[a] = item
            item += 1
        tools.append(ToolSpec(name=name, accepted_args=accepted, yields=yields))
    n_items = item
    item_owner = {i: t.name for t in tools for i in t.yields.values()}

    tasks = []
    for j in range(config.n_tasks):
        k = int(rng.integers(config.min_items, config.max_items + 1))
        required = tuple(int(i) for i in np.sort(rng.choice(n_items, k, replace=False)))
        relevant = sorted({item_owner[i] for i in required})
        others = [n for n in tool_names if n not in relevant]
        n_distract = min(config.distractor_ratio * len(relevant), len(others))
        distract = tuple(sorted(rng.choice(others, n_distract, replace=False).tolist())) if n_distract else ()
        candidates = tuple(sorted(relevant + list(distract)))
        tasks.append(
            Task(
                id=j,
                query_tokens=(f"q{j}",) + candidates,
                required_items=required,
                distractor_hint=distract,
            )
        )

    vocab = Vocab(
        tools=tool_names,
        args=arg_tokens,
        answers=tuple(f"item{i}" for i in range(n_items)),
        observations=(ERROR_OBS, MALFORMED_OBS) + tuple(f"q{j}" for j in range(config.n_tasks)),
    )
    world = ToolWorld(
        tools=tuple(tools),
        tasks=tuple(tasks),
        vocab=vocab,
        horizon=config.horizon,
        seed=int(seed),
        max_action_len=config.max_action_len,
        obs_noise=float(config.obs_noise),
    )
    check_world(world)
    return world


@dataclass(frozen=True)
class EnvState:
    task_id: int
    t: int
    gathered: frozenset = field(default_factory=frozenset)
    last_obs: tuple[str, ...] = ()
    done: bool = False


@dataclass(frozen=True)
class Action:
    """A complete action: its tokens and the parse of those tokens.

    ``kind`` is ``"call"``, ``"finish"`` or ``"malformed"``.
    """

    tokens: tuple[str, ...]
    kind: str
    tool: str | None = None
    arg: str | None = None
    answer: tuple[str, ...] = ()

    @property
    def is_call(self) -> bool:
        return self.kind == "call"

    @property
    def is_finish(self) -> bool:
        return self.kind == "finish"

    @property
    def is_malformed(self) -> bool:
        return self.kind == "malformed"


@dataclass(frozen=True)
class ObservationRecord:
    tokens: tuple[str, ...]
    success: bool = False
    item: int | None = None


def parse_action(vocab: Vocab, tokens: Sequence[str]) -> Action:
    """Classify a token sequence.

    ``CALL name ARG arg END`` is a tool call and ``FINISH answer* [END]`` a
    final answer. Anything else is Malformed, which is a legal outcome.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("action must contain at least one token")
    vocab.encode(tokens)
    if (
        len(tokens) == 5
        and tokens[0] == CALL
        and tokens[1] in vocab.tool_set
        and tokens[2] == ARG
        and tokens[3] in vocab.arg_set
        and tokens[4] == END
    ):
        return Action(tokens, "call", tool=tokens[1], arg=tokens[3])
    if tokens[0] == FINISH:
        body = tokens[1:-1] if tokens[-1] == END and len(tokens) > 1 else tokens[1:]
        if all(tok in vocab.answer_set for tok in body):
            return Action(tokens, "finish", answer=body)
    return Action(tokens, "malformed")


def _walk(vocab: Vocab, prefix: Sequence[str], max_len: int):
    if not prefix:
        return SLOT_START
    head = prefix[0]
    if head == CALL:
        expect = (vocab.tool_set, {ARG}, vocab.arg_set, {END})
        for i, tok in enumerate(prefix[1:]):
            if i >= len(expect) or tok not in expect[i]:
                return DEAD
        n = len(prefix)
        return COMPLETE if n == 5 else (SLOT_NAME, SLOT_ARGKW, SLOT_ARGVAL, SLOT_CALLEND)[n - 1]
    if head == FINISH:
        for i, tok in enumerate(prefix[1:], start=1):
            if tok == END:
                return COMPLETE if i == len(prefix) - 1 else DEAD
            if tok not in vocab.answer_set:
                return DEAD
        return COMPLETE if len(prefix) >= max_len else SLOT_ANSWER
    return DEAD


def prefix_status(vocab: Vocab, prefix: Sequence[str], max_len: int) -> str:
    """``"open"``, ``"complete"`` or ``"dead"`` for a partially decoded action.

    Decoding stops at a complete or dead prefix. A dead prefix cannot be
    extended into a well-formed action and is returned as Malformed.
    Reaching ``max_len`` completes an open prefix.
    """
    state = _walk(vocab, prefix, max_len)
    if state in (COMPLETE, DEAD):
        return state
    return COMPLETE if len(prefix) >= max_len else OPEN


def grammar_slot(vocab: Vocab, prefix: Sequence[str], max_len: int) -> int | None:
    """Slot of an open prefix, ``None`` for complete or dead ones."""
    state = _walk(vocab, prefix, max_len)
    return state if isinstance(state, int) else None


def reset(world: ToolWorld, task_id) -> EnvState:
    task = world.task(task_id)
    return EnvState(task_id=task.id, t=1, gathered=frozenset(), last_obs=task.query_tokens, done=False)


def _noisy_failure(world: ToolWorld, state: EnvState, action: Action) -> bool:
    if world.obs_noise <= 0:
        return False
    idx = world.vocab.index
    key = [world.seed, state.task_id, state.t, idx[action.tool], idx[action.arg]]
    return np.random.default_rng(key).random() < world.obs_noise


def step(world: ToolWorld, state: EnvState, action: Action) -> tuple[EnvState, ObservationRecord]:
    """Apply ``action`` in ``state``.

    A call with a known tool and accepted argument adds the yielded item to
    ``gathered`` and observes the item's answer token. Other calls observe the
    tool's error token and malformed actions observe ``BADFMT``. ``FINISH``
    ends the episode. So does acting at ``t == horizon``.
    """
    if state.done:
        raise EpisodeFinished(f"task {state.task_id} already finished at t={state.t}")
    gathered = state.gathered
    if action.is_call:
        tool = world.tool_by_name.get(action.tool)
        if tool is not None and action.arg in tool.yields and not _noisy_failure(world, state, action):
            item = tool.yields[action.arg]
            gathered = gathered | {item}
            obs = ObservationRecord((world.item_token(item),), success=True, item=item)
        else:
            error = tool.error_obs if tool is not None else ERROR_OBS
            obs = ObservationRecord((error,))
    elif action.is_finish:
        obs = ObservationRecord(())
    else:
        obs = ObservationRecord((MALFORMED_OBS,))
    done = action.is_finish or state.t >= world.horizon
    next_state = EnvState(
        task_id=state.task_id,
        t=state.t if done else state.t + 1,
        gathered=gathered,
        last_obs=obs.tokens,
        done=done,
    )
    return next_state, obs


def canonical_actions(world: ToolWorld, gathered=frozenset()) -> list[Action]:
    """Outcome-distinct actions available in a state with ``gathered`` items.

    Every tool call, one representative Malformed action, and one Finish per
    subset of gathered items. Answer tokens of ungathered items never change
    a Finish outcome, so those Finish variants are omitted. Finish variants
    come first so that ties favour stopping early.
    """
    from itertools import combinations

    vocab = world.vocab
    limit = world.max_action_len - 2
    items = sorted(gathered)
    finishes = []
    for r in range(min(len(items), limit) + 1):
        for combo in combinations(items, r):
            answer = tuple(world.item_token(i) for i in combo)
            finishes.append(Action((FINISH, *answer, END), "finish", answer=answer))
    calls = [
        Action((CALL, name, ARG, arg, END), "call", tool=name, arg=arg)
        for name in vocab.tools
        for arg in vocab.args
    ]
    return finishes + calls + [Action((END,), "malformed")]
