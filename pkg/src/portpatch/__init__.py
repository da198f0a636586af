"""Toolkit for merging, porting, and diagnosing low-rank model-update patches
across evolving checkpoints, with a minimal transformer forward engine and a
synthetic model-evolution simulator for desk-scale verification."""

from ._version import __version__
from .container import (
    Checkpoint,
    read_adapter,
    read_container,
    write_adapter,
    write_container,
)
from .diagnostics import (
    ModuleDiagnostics,
    NegligibilityReport,
    TermMetrics,
    module_diagnostics,
    negligibility_report,
    render_report,
    report_from_json,
    term_metrics,
)
from .errors import PortPatchError
from .kernels import (
    SvdResult,
    fro_norm,
    layer_norm_rows,
    matmul,
    numerical_rank,
    seeded_init,
    sigma_max,
    softmax_rows,
    svd,
)
from .patch import (
    LoraFactors,
    LoraPatch,
    ResidualPatch,
    delta_weight,
    extract_adapter,
    merge,
    port,
    residual_patch,
)
from .simulate import (
    FitResult,
    SimConfig,
    SimQuadruple,
    TaskDataset,
    fit_adapter,
    gen_base_and_update,
    gen_task,
    load_sim_config,
    persist_quadruple,
    run_cycle,
)
from .transformer import (
    TransformerConfig,
    attention_head,
    feed_forward,
    forward,
    forward_with_patch,
    multi_head_attention,
    random_weights,
)

__all__ = [
    "__version__",
    "Checkpoint",
    "FitResult",
    "LoraFactors",
    "LoraPatch",
    "ModuleDiagnostics",
    "NegligibilityReport",
    "PortPatchError",
    "ResidualPatch",
    "SimConfig",
    "SimQuadruple",
    "SvdResult",
    "TaskDataset",
    "TermMetrics",
    "TransformerConfig",
    "attention_head",
    "delta_weight",
    "extract_adapter",
    "feed_forward",
    "fit_adapter",
    "forward",
    "forward_with_patch",
    "fro_norm",
    "gen_base_and_update",
    "gen_task",
    "layer_norm_rows",
    "load_sim_config",
    "matmul",
    "merge",
    "module_diagnostics",
    "multi_head_attention",
    "negligibility_report",
    "numerical_rank",
    "persist_quadruple",
    "port",
    "random_weights",
    "read_adapter",
    "read_container",
    "render_report",
    "report_from_json",
    "residual_patch",
    "run_cycle",
    "seeded_init",
    "sigma_max",
    "softmax_rows",
    "svd",
    "term_metrics",
    "write_adapter",
    "write_container",
]
