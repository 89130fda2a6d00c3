from .env import (
    CompiledLevels,
    EnvState,
    EpisodeResult,
    SteppingDoneError,
    TransitionBatch,
    evaluate_episodes,
    reset_state,
    rollout,
    run_rollout,
    step,
    table_policy,
    uniform_policy,
)
from .handcrafted import NAMES as HANDCRAFTED_NAMES, all_handcrafted, handcrafted
from .level import (
    ACTIONS,
    NUM_ACTIONS,
    Level,
    LevelError,
    ObjectSpec,
    dump_levels,
    empty_walls,
    load_levels,
)
from .sampler import DistributionConfig, SamplerConfigError, sample_level
from .solver import OptimalSolution, SolverBudgetError, solve_optimal

__all__ = [
    "ACTIONS", "NUM_ACTIONS", "CompiledLevels", "DistributionConfig", "EnvState",
    "EpisodeResult", "HANDCRAFTED_NAMES", "Level", "LevelError", "ObjectSpec",
    "OptimalSolution", "SamplerConfigError", "SolverBudgetError", "SteppingDoneError",
    "TransitionBatch", "all_handcrafted", "dump_levels", "empty_walls", "evaluate_episodes",
    "handcrafted", "load_levels", "reset_state", "rollout", "run_rollout", "sample_level",
    "solve_optimal", "step", "table_policy", "uniform_policy",
]
