"""Two-player ranking games for imitation learning on tabular MDPs."""

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .diagnostics import (
    CSV_COLUMNS,
    GameReport,
    bound_rhs,
    f_divergence,
    measure_eps_pi,
    measure_eps_r,
    reports_from_csv,
    reports_to_csv,
    steps_to_threshold,
    theorem1_certificate,
)
from .envs import MutationSpec, ScenarioSpec, apply_mutation, build_env, make_offline_preferences
from .estimators import RankGameImitator, RankingRewardRegressor
from .mdp import (
    Policy,
    TabularMdp,
    Trajectory,
    Visitation,
    empirical_visitation,
    exact_visitation,
    hard_value_iteration,
    load_mdp,
    pad_absorbing,
    policy_return,
    sample_trajectories,
    save_mdp,
    soft_value_iteration,
)
from .ranking import (
    RankingChain,
    RankingDataset,
    RankingPair,
    ShapingFamily,
    Snippets,
    augment_snippets,
    auto_chain,
    closed_form_reward,
    fit_reward,
    fit_reward_gd,
    loss_lk,
    loss_offline_combined,
    loss_slk,
    loss_supremum,
    make_interpolants,
    shape_targets,
)
from .reward import RewardFn
from .stackelberg import GameConfig, leader_gradient_pal_analytic, run_game, run_pal, run_ral

__version__ = "0.1.0"
