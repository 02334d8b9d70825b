"""Emergency-stop MDPs: build them from demonstrations or live interventions,
solve and learn on them, and certify the sub-optimality they introduce."""

from .mdp import (
    ConvergenceError,
    DiscountedEpisodic,
    EvalMode,
    FiniteHorizon,
    TabularMdp,
    TabularPolicy,
    Trajectory,
    TrajectoryStep,
    ValueIterationResult,
    average_state_distribution,
    policy_value,
    rollout,
    state_distribution,
    state_distribution_series,
    value_iteration,
)
from .envs import (
    MAP_4X4,
    MAP_8X8,
    FrozenLakeSpec,
    PendulumSpec,
    build_frozenlake,
    pendulum_reset,
    pendulum_step,
    random_mdp,
)
from .support import (
    CompactEStop,
    ContinuousBox,
    EStopMdp,
    StateSet,
    SupportSet,
    TimeIndexedSets,
    VisitCountBudget,
    box_from_trajectories,
    build_estop_mdp,
    compact_estop_mdp,
    estop_rollout,
    estop_step_filter,
    filtered_rollout,
    rho0_support,
)
from .estimation import (
    VisitStats,
    build_support_by_budget,
    build_support_by_fraction,
    estimate_visit_stats,
    exact_hitting_probabilities,
    learned_estop,
)
from .learners import (
    LearnerConfig,
    LearningCurve,
    actor_critic,
    cross_entropy_search,
    evaluate_pendulum_policy,
    q_learning,
)
from .bounds import (
    GapCertificate,
    bernstein_guarantee,
    certify_imperfect,
    certify_perfect,
    certify_stationary,
    coupon_probability,
    cover_probability,
    hoeffding_guarantee,
    regret_decomposition,
    window_value,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
