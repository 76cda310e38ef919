"""Closed-form key-value editing of toy residual FFN models.

Three editors for a down-projection W0 given preserved-key statistics:
rank-one exact (rome), batched least-squares (memit), and batched
equality-constrained (emmet) — plus the synthetic-fact harness, edit
metrics, experiment drivers, and deterministic CSV/SVG/PNG reporting.
"""

from .editors import (
    EditBatchMatrices,
    EditDelta,
    ObjectiveBreakdown,
    emmet_delta,
    emmet_oracle_kkt,
    memit_delta,
    pm_objective,
    rome_delta,
)
from .errors import (
    DegenerateKey,
    DimensionMismatch,
    Diverged,
    DuplicateKeys,
    InvalidConfig,
    NotSPD,
    NumericalError,
    PmeditError,
    SchemaMismatch,
    Singular,
    SingularGram,
    UnknownFactId,
)
from .harness import (
    ExperimentPlan,
    MetricsReport,
    SyntheticFact,
    aggregate_reports,
    apply_edit,
    composite_score,
    eval_metrics,
    gen_facts,
    lambda_sweep,
    layer_sweep,
    load_facts,
    run_batched,
    run_sequential_batched,
    run_singular,
    save_facts,
    thread_count,
)
from .model import (
    ForwardTrace,
    PreservationBasis,
    ToyModel,
    ToyModelConfig,
    estimate_preservation,
    forward,
    forward_from,
    init_model,
    load_model,
    save_model,
)
from .numerics import frobenius, numerical_rank, solve_general, solve_spd
from .reporting import (
    CSV_HEADER,
    GROUP_BY_NAMES,
    METRIC_NAMES,
    MetricsRow,
    RunManifest,
    emit_plot_svg,
    group_run_id,
    metrics_rows,
    read_metrics_csv,
    render_plot_png,
    seed_hash,
    tool_version,
    write_manifest,
    write_metrics_csv,
)
from .value_solver import ValueSolveOptions, ValueSolveResult, solve_value, value_loss_grad

__version__ = "0.1.0"

__all__ = [
    "CSV_HEADER",
    "DegenerateKey",
    "DimensionMismatch",
    "Diverged",
    "DuplicateKeys",
    "EditBatchMatrices",
    "EditDelta",
    "ExperimentPlan",
    "ForwardTrace",
    "GROUP_BY_NAMES",
    "InvalidConfig",
    "METRIC_NAMES",
    "MetricsReport",
    "MetricsRow",
    "NotSPD",
    "NumericalError",
    "ObjectiveBreakdown",
    "PmeditError",
    "PreservationBasis",
    "RunManifest",
    "SchemaMismatch",
    "Singular",
    "SingularGram",
    "SyntheticFact",
    "ToyModel",
    "ToyModelConfig",
    "UnknownFactId",
    "ValueSolveOptions",
    "ValueSolveResult",
    "aggregate_reports",
    "apply_edit",
    "composite_score",
    "emit_plot_svg",
    "emmet_delta",
    "emmet_oracle_kkt",
    "estimate_preservation",
    "eval_metrics",
    "forward",
    "forward_from",
    "frobenius",
    "gen_facts",
    "group_run_id",
    "init_model",
    "lambda_sweep",
    "layer_sweep",
    "load_facts",
    "load_model",
    "memit_delta",
    "metrics_rows",
    "numerical_rank",
    "pm_objective",
    "read_metrics_csv",
    "render_plot_png",
    "rome_delta",
    "run_batched",
    "run_sequential_batched",
    "run_singular",
    "save_facts",
    "save_model",
    "seed_hash",
    "solve_general",
    "solve_spd",
    "solve_value",
    "thread_count",
    "tool_version",
    "value_loss_grad",
    "write_manifest",
    "write_metrics_csv",
]
