"""Gradient-aligned layer selection for online test-time adaptation."""

from .engine import (
    AnchorState,
    GalaConfig,
    GalaStepResult,
    ParameterGrouping,
    SelectionDecision,
    UpdateProposal,
    apply_masked_update,
    build_grouping,
    cosine_alignment,
    cosine_via_decomposition,
    decide,
    gala_step,
    init_anchor,
    maybe_reset,
    total_displacement,
    vector_angle,
    warmup_scale,
)
from .baselines import (
    BaselineSelector,
    BaselineStepResult,
    OracleSweepResult,
    SelectorKind,
    oracle_sweep,
)
from .config import (
    SWEEP_AXES,
    ExperimentConfig,
    GeometrySettings,
    PretrainSettings,
    SelectorChoice,
    SweepSettings,
    load_config,
    parse_config,
)
from .errors import ConfigurationError, GalaError, NumericsError, TrainingError
from .metrics import (
    TRACE_COLUMNS,
    MetricsSummary,
    RunRecord,
    TraceStep,
    config_fingerprint,
    export_geometry_grid,
    forgetting,
    generalization,
    geometry_grid,
    parse_summary,
    parse_trace,
    selection_frequency,
    spearman_rank_correlation,
    summarize,
    tta_accuracy,
    write_aggregate_csv,
    write_summary,
    write_trace,
)
from .runner import run_baseline, run_gala
from .shiftbench import (
    ShiftSpec,
    ShiftStream,
    TaskData,
    TaskSpec,
    apply_shift,
    build_stream,
    export_stream_data,
    generate_task,
    load_manifest,
    save_manifest,
)
from .nn import (
    Batch,
    LayerSpec,
    LossKind,
    ModelParameters,
    Network,
    OptimizerConfig,
    PretrainResult,
    accuracy,
    load_checkpoint,
    minibatches,
    pretrain_erm,
    save_checkpoint,
    softmax,
)

__version__ = "0.1.0"
