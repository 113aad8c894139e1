"""Min-max heterogeneous capacitated vehicle routing: a neural solver built
on a from-scratch numpy autodiff core, plus exact and heuristic references.

The package covers the full loop: instance generation, an exact fleet MDP,
an attention policy over (vehicle, node) pairs, symmetry-augmented REINFORCE
training, greedy/sampling inference, and classical baselines for gap
reporting.  The `mmhcvrp` console script exposes it all as subcommands.
"""

from .baselines import SearchBudget, exact_small, genetic, simulated_annealing
from .errors import FileFormatError, InternalError, NumericError, ValidationError
from .inference import EvalReport, EvalRow, evaluate_benchmark, solve_greedy, solve_sampling, write_report
from .mdp import (
    Action,
    FleetState,
    Solution,
    action_mask,
    evaluate_solution,
    finalize_reward,
    init_state,
    is_terminal,
    random_rollout,
    read_solution,
    step,
    write_solution,
)
from .model import (
    ModelConfig,
    ParameterSet,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .problem import (
    GenConfig,
    Instance,
    distance_matrix,
    generate_instance,
    generate_many,
    instances_equal,
    read_instance,
    write_instance,
)
from .training import (
    Adam,
    AugmentedBatch,
    AugmentedVariant,
    Trajectory,
    TrainingConfig,
    TrainSummary,
    augment_batch,
    augment_instance,
    group_advantages,
    map_routes_through_permutation,
    node_transform,
    reinforce_gradient,
    rollout,
    run_rollouts,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Adam",
    "AugmentedBatch",
    "AugmentedVariant",
    "EvalReport",
    "EvalRow",
    "FileFormatError",
    "FleetState",
    "GenConfig",
    "Instance",
    "InternalError",
    "ModelConfig",
    "NumericError",
    "ParameterSet",
    "SearchBudget",
    "Solution",
    "Trajectory",
    "TrainingConfig",
    "TrainSummary",
    "ValidationError",
    "action_mask",
    "augment_batch",
    "augment_instance",
    "distance_matrix",
    "evaluate_benchmark",
    "evaluate_solution",
    "exact_small",
    "finalize_reward",
    "generate_instance",
    "generate_many",
    "genetic",
    "group_advantages",
    "init_parameters",
    "init_state",
    "instances_equal",
    "is_terminal",
    "load_checkpoint",
    "map_routes_through_permutation",
    "node_transform",
    "random_rollout",
    "read_instance",
    "read_solution",
    "reinforce_gradient",
    "rollout",
    "run_rollouts",
    "save_checkpoint",
    "simulated_annealing",
    "solve_greedy",
    "solve_sampling",
    "step",
    "train",
    "write_instance",
    "write_report",
    "write_solution",
    "__version__",
]
