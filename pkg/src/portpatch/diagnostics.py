"""Negligibility diagnostics: spectral and Frobenius magnitudes of the dense
"naive update" term (updated weights plus the old personalization delta)
versus the residual between the two personalization deltas, with their ratios.

Reports carry three summaries side by side because a single printed number
hides the aggregation choice: per-module metrics, a block-diagonal aggregate
(max sigma, root of summed squared Frobenius norms), and the plain mean of
the per-module ratios.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ._version import __version__
from .container import Checkpoint
from .errors import MergeError, ParseError
from .kernels import check_matrix, fro_norm, sigma_max
from .patch import LoraPatch, delta_weight, residual_patch, resolve_module

RATIO_INF = math.inf


@dataclass(frozen=True)
class TermMetrics:
    sigma_max: float
    fro: float


@dataclass(frozen=True)
class ModuleDiagnostics:
    naive: TermMetrics
    residual: TermMetrics
    ratio_sigma: float
    ratio_fro: float


@dataclass
class NegligibilityReport:
    per_module: dict[str, ModuleDiagnostics]
    aggregate: ModuleDiagnostics
    mean_ratio_sigma: float
    mean_ratio_fro: float
    provenance: dict[str, str]


def term_metrics(t: np.ndarray) -> TermMetrics:
    """Largest singular value and Frobenius norm of a 2-D tensor, in float64."""
    t = check_matrix(t, "term")
    return TermMetrics(sigma_max=sigma_max(t), fro=fro_norm(t))


def _ratio(numerator: float, denominator: float) -> float:
    if denominator == 0.0:
        return RATIO_INF
    return numerator / denominator


def module_diagnostics(naive: TermMetrics, residual: TermMetrics) -> ModuleDiagnostics:
    """Ratio pipeline for one module (or for pre-computed magnitudes)."""
    return ModuleDiagnostics(
        naive=naive,
        residual=residual,
        ratio_sigma=_ratio(naive.sigma_max, residual.sigma_max),
        ratio_fro=_ratio(naive.fro, residual.fro),
    )


def negligibility_report(
    theta_prime: Checkpoint, patch_old: LoraPatch, patch_new: LoraPatch
) -> NegligibilityReport:
    """Measure naive-update and residual magnitudes module by module.

    The naive term is formed densely (updated tensor plus the old delta); the
    residual is the difference of the two deltas. Aggregation runs over the
    sorted module names.
    """
    residuals = residual_patch(patch_old, patch_new)
    per_module: dict[str, ModuleDiagnostics] = {}
    for module in residuals.modules:
        name = resolve_module(theta_prime, module)
        target = theta_prime.tensors[name]
        delta_old = delta_weight(patch_old, module)
        if target.shape != delta_old.shape:
            raise MergeError(
                f"module {module!r}: delta shape {delta_old.shape} does not match "
                f"tensor {name!r} shape {target.shape}"
            )
        naive_dense = target.astype(np.float64, copy=False) + delta_old
        per_module[module] = module_diagnostics(
            term_metrics(naive_dense), term_metrics(residuals.modules[module])
        )

    diags = list(per_module.values())
    aggregate = module_diagnostics(
        TermMetrics(
            sigma_max=max(d.naive.sigma_max for d in diags),
            fro=math.sqrt(sum(d.naive.fro**2 for d in diags)),
        ),
        TermMetrics(
            sigma_max=max(d.residual.sigma_max for d in diags),
            fro=math.sqrt(sum(d.residual.fro**2 for d in diags)),
        ),
    )
    provenance = {
        "updated_model_version": theta_prime.metadata.get("model_version", "<unknown>"),
        "patch_old_version": patch_old.metadata.get("model_version", "<unknown>"),
        "patch_new_version": patch_new.metadata.get("model_version", "<unknown>"),
        "patch_old_rank": str(patch_old.rank),
        "patch_new_rank": str(patch_new.rank),
        "tool_version": __version__,
    }
    return NegligibilityReport(
        per_module=per_module,
        aggregate=aggregate,
        mean_ratio_sigma=sum(d.ratio_sigma for d in diags) / len(diags),
        mean_ratio_fro=sum(d.ratio_fro for d in diags) / len(diags),
        provenance=provenance,
    )


def _emit(value, indent: int) -> str:
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            return "{}"
        parts = []
        for key in sorted(value):
            parts.append(f'{pad}  {json.dumps(key)}: {_emit(value[key], indent + 1)}')
        return "{\n" + ",\n".join(parts) + f"\n{pad}}}"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, bool):
        raise ParseError("cannot render booleans")
    if isinstance(value, int):
        return repr(value)
    if isinstance(value, float):
        if math.isinf(value):
            return '"inf"'
        return format(value, ".17g")
    raise ParseError(f"cannot render value of type {type(value).__name__}")


def canonical_json(value) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits (which
    round-trip float64 exactly), infinities as the string "inf"."""
    return _emit(value, 0) + "\n"


def _diag_to_dict(diag: ModuleDiagnostics) -> dict:
    return {
        "naive": {"sigma_max": diag.naive.sigma_max, "fro": diag.naive.fro},
        "residual": {"sigma_max": diag.residual.sigma_max, "fro": diag.residual.fro},
        "ratio_sigma": diag.ratio_sigma,
        "ratio_fro": diag.ratio_fro,
    }


def report_to_dict(report: NegligibilityReport) -> dict:
    return {
        "per_module": {name: _diag_to_dict(d) for name, d in report.per_module.items()},
        "aggregate": _diag_to_dict(report.aggregate),
        "mean_ratio_sigma": report.mean_ratio_sigma,
        "mean_ratio_fro": report.mean_ratio_fro,
        "provenance": dict(report.provenance),
    }


def _float_in(value) -> float:
    if value == "inf":
        return RATIO_INF
    if isinstance(value, (int, float)):
        return float(value)
    raise ParseError(f"expected a number or \"inf\", got {value!r}")


def _diag_from_dict(data: dict) -> ModuleDiagnostics:
    return ModuleDiagnostics(
        naive=TermMetrics(
            sigma_max=_float_in(data["naive"]["sigma_max"]), fro=_float_in(data["naive"]["fro"])
        ),
        residual=TermMetrics(
            sigma_max=_float_in(data["residual"]["sigma_max"]),
            fro=_float_in(data["residual"]["fro"]),
        ),
        ratio_sigma=_float_in(data["ratio_sigma"]),
        ratio_fro=_float_in(data["ratio_fro"]),
    )


def report_from_json(text: str) -> NegligibilityReport:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed report JSON: {exc}") from exc
    try:
        return NegligibilityReport(
            per_module={name: _diag_from_dict(d) for name, d in data["per_module"].items()},
            aggregate=_diag_from_dict(data["aggregate"]),
            mean_ratio_sigma=_float_in(data["mean_ratio_sigma"]),
            mean_ratio_fro=_float_in(data["mean_ratio_fro"]),
            provenance={str(k): str(v) for k, v in data["provenance"].items()},
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"report JSON missing field: {exc}") from exc


def _md_num(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return format(value, ".6g")


def render_report(report: NegligibilityReport, fmt: str = "json") -> str:
    """Render as canonical JSON (17 significant digits, "inf" sentinel strings)
    or a markdown table with one column per module plus the aggregate."""
    if fmt == "json":
        return canonical_json(report_to_dict(report))
    if fmt not in ("markdown", "md"):
        raise ParseError(f"unknown report format {fmt!r}, expected json or markdown")

    modules = list(report.per_module)
    columns = modules + ["aggregate"]
    diags = [report.per_module[m] for m in modules] + [report.aggregate]
    rows = [
        ("naive update", "σ_max", [d.naive.sigma_max for d in diags]),
        ("naive update", "‖·‖_F", [d.naive.fro for d in diags]),
        ("residual", "σ_max", [d.residual.sigma_max for d in diags]),
        ("residual", "‖·‖_F", [d.residual.fro for d in diags]),
        ("ratio", "σ_max/σ_max", [d.ratio_sigma for d in diags]),
        ("ratio", "‖·‖_F/‖·‖_F", [d.ratio_fro for d in diags]),
    ]
    lines = [
        "| term | metric | " + " | ".join(columns) + " |",
        "| --- | --- | " + " | ".join("---" for _ in columns) + " |",
    ]
    for term, metric, values in rows:
        lines.append(
            f"| {term} | {metric} | " + " | ".join(_md_num(v) for v in values) + " |"
        )
    lines.append("")
    lines.append(f"mean ratio σ_max/σ_max across modules: {_md_num(report.mean_ratio_sigma)}")
    lines.append(f"mean ratio ‖·‖_F/‖·‖_F across modules: {_md_num(report.mean_ratio_fro)}")
    return "\n".join(lines) + "\n"
