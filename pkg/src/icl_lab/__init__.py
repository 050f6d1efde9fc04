"""Desk-scale laboratory for one-layer softmax attention trained by GD on
in-context linear regression over orthonormal feature tokens."""

from icl_lab.errors import (
    DimensionError,
    EnumerationTooLarge,
    InvalidPromptError,
    MissingTaskError,
    NumericError,
    RegimeMismatch,
)
from icl_lab.features import (
    FeatureBasis,
    Prompt,
    PromptCounts,
    TokenDistribution,
    build_basis,
    enumerate_counts,
    event_membership,
    multinomial_tail_bound,
    sample_counts,
)
from icl_lab.attention import (
    AttentionProfile,
    ReducedWeights,
    attention_profile,
    embed,
    forward,
    lift,
    predict_from_profile,
    reduce,
)
from icl_lab.gradients import (
    GradientReport,
    finite_diff_check,
    full_q_gradient,
    per_count_integrands,
    per_count_loss,
    population_gradient_exact,
    population_gradient_mc,
)
from icl_lab.trainer import TrainConfig, TrajectoryRecord, dual_mode_run, gd_run, gd_step
from icl_lab.analysis import (
    LossReport,
    PhaseReport,
    Thresholds,
    attention_concentration,
    detect_phases_balanced,
    detect_phases_imbalanced,
    icl_test,
    loss_report,
)

__version__ = "0.1.0"
