"""Simulated multi-step tool-use environment."""
from .search import count_sequences, oracle_search, solve_dp
from .trajectory import (
    Step,
    Trajectory,
    rollout_actions,
    trajectory_from_record,
    trajectory_to_record,
)
from .world import (
    ARG,
    CALL,
    END,
    ERROR_OBS,
    FINISH,
    MALFORMED_OBS,
    N_SLOTS,
    Action,
    EnvState,
    ObservationRecord,
    Task,
    ToolSpec,
    ToolWorld,
    Vocab,
    WorldConfig,
    canonical_actions,
    check_world,
    generate_world,
    grammar_slot,
    parse_action,
    prefix_status,
    reset,
    step,
)
