"""Channel pruning with closed-form compensation.

Typical flow: estimate per-layer input statistics with
:func:`estimate_statistics`, then either prune a layer at a fixed sparsity
with :func:`prune_compensated` or let :func:`structural_search` find the
per-layer sparsities under an accuracy-drop tolerance.
"""
from .compensation import CompensationResult, Selection, compensate
from .data import Dataset, load_dataset, save_raw, split, synth_normal
from .errors import (
    CapPruneError,
    DeadActivationError,
    FormatError,
    NotPositiveDefiniteError,
    PruneError,
    ShapeError,
)
from .network import (
    Activation,
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    FlopsReport,
    GlobalAvgPool,
    MaxPool,
    Model,
    apply_compensation,
    flops,
    forward,
    load_model,
    prune_layer,
    save_model,
)
from .search import SearchConfig, SearchReport, evaluate_accuracy, layer_order, prune_compensated, structural_search
from .selection import (
    CholeskyState,
    baseline_select,
    cap_select,
    extend_inverse,
    greedy_gain,
    reconstruction_loss,
)
from .statistics import (
    ActivationContext,
    LayerStatistics,
    activation_weight,
    estimate_statistics,
    load_statistics,
    merge_statistics,
    save_statistics,
)

__version__ = "0.1.0"
