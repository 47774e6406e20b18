"""Structured filter pruning: L1 and geometric-median (FPGM) criteria,
soft filter pruning, and parameter/sparsity accounting."""
__version__ = "0.1.0"

from .accounting import (
    LayerKind,
    LayerSpec,
    ModelSpec,
    PrunablePolicy,
    PruneReport,
    apply_policy,
    build_report,
    count_params,
    real_sparsity,
    removed_params_for,
)
from .criteria import Criterion, ScoreVector, Selection, fpgm_scores, geometric_median, l1_scores, select
from .sfp import (
    LrDirective,
    Phase,
    PruneConfig,
    PruneMask,
    SfpSchedule,
    SfpState,
    apply_masks,
    derive_masks,
    step_epoch,
)
from .tensor_store import FilterBank, Tensor, WeightContainer, as_filter_bank, read_container, write_container
