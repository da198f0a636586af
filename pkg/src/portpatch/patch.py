"""Low-rank patch arithmetic: materialize deltas, merge, port, residuals.

A patch stores per-module factor pairs (b, a) with a shared rank r and a
scaling numerator alpha; the dense update for a module is (alpha/r) * b @ a.
Porting adds a patch fitted on an older base onto a newer checkpoint without
any transformation: the arithmetic is identical to a merge, only the recorded
provenance differs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .container import Checkpoint
from .errors import (
    MergeError,
    ParameterError,
    PatchCompatibilityError,
    ShapeError,
    UnknownModuleError,
)
from .kernels import check_matrix, svd

logger = logging.getLogger("portpatch")


@dataclass
class LoraFactors:
    """Factor pair for one module: a is (rank, d_in), b is (d_out, rank)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.a = check_matrix(self.a, "lora_A")
        self.b = check_matrix(self.b, "lora_B")
        if self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(
                f"factor inner dims differ: lora_B {self.b.shape} x lora_A {self.a.shape}"
            )
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ShapeError("factors contain non-finite values")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the dense update this pair materializes (d_out, d_in)."""
        return (self.b.shape[0], self.a.shape[1])


@dataclass
class LoraPatch:
    modules: dict[str, LoraFactors]
    rank: int
    alpha: float
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"patch rank must be >= 1, got {self.rank}")
        self.modules = {name: self.modules[name] for name in sorted(self.modules)}
        for name, factors in self.modules.items():
            if factors.rank != self.rank:
                raise ShapeError(
                    f"module {name!r} factor rank {factors.rank} != patch rank {self.rank}"
                )

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def module_names(self) -> list[str]:
        return list(self.modules)


@dataclass
class ResidualPatch:
    """Dense per-module residual matrices, ordered lexicographically."""

    modules: dict[str, np.ndarray]

    def __post_init__(self):
        self.modules = {
            name: check_matrix(self.modules[name], name) for name in sorted(self.modules)
        }


def delta_weight(patch: LoraPatch, module: str) -> np.ndarray:
    """Dense update (alpha/r) * b @ a for one module, accumulated in float64."""
    if module not in patch.modules:
        raise UnknownModuleError(f"module {module!r} not in patch (has: {patch.module_names()})")
    factors = patch.modules[module]
    b = factors.b.astype(np.float64, copy=False)
    a = factors.a.astype(np.float64, copy=False)
    return patch.scaling * (b @ a)


def resolve_module(checkpoint: Checkpoint, module: str) -> str:
    """Map a patch module path to its checkpoint tensor name (path or path.weight)."""
    candidate = module + ".weight"
    if candidate in checkpoint.tensors:
        return candidate
    if module in checkpoint.tensors:
        return module
    raise MergeError(f"module {module!r} does not resolve to a tensor in the checkpoint")


def _apply(base: Checkpoint, patch: LoraPatch, extra_metadata: dict[str, str]) -> Checkpoint:
    updates: dict[str, np.ndarray] = {}
    for module in patch.module_names():
        name = resolve_module(base, module)
        target = base.tensors[name]
        delta = delta_weight(patch, module)
        if target.shape != delta.shape:
            raise MergeError(
                f"module {module!r}: patch delta shape {delta.shape} "
                f"does not match base tensor {name!r} shape {target.shape}"
            )
        merged = target.astype(np.float64, copy=False) + delta
        updates[name] = merged.astype(target.dtype, copy=False)
    tensors = dict(base.tensors)
    tensors.update(updates)
    metadata = dict(base.metadata)
    metadata.update(extra_metadata)
    return Checkpoint(tensors=tensors, metadata=metadata)


def _patch_provenance(patch: LoraPatch) -> dict[str, str]:
    return {
        "applied_patch_rank": str(patch.rank),
        "applied_patch_alpha": repr(float(patch.alpha)),
        "applied_patch_modules": ",".join(patch.module_names()),
    }


def merge(base: Checkpoint, patch: LoraPatch) -> Checkpoint:
    """Add each module's materialized delta to the base; untargeted tensors pass through."""
    return _apply(base, patch, _patch_provenance(patch))


def port(updated: Checkpoint, patch: LoraPatch) -> Checkpoint:
    """Apply a patch fitted on an older base onto an updated checkpoint.

    Same arithmetic as merge; the result approximates the model one would get
    by re-fitting on the updated base. The output metadata records both model
    versions, with a warning entry when either side does not declare one.
    """
    extra = _patch_provenance(patch)
    target_version = updated.metadata.get("model_version")
    source_version = patch.metadata.get("model_version")
    extra["ported"] = "true"
    if target_version is not None:
        extra["port_target_version"] = target_version
    if source_version is not None:
        extra["port_source_version"] = source_version
    if target_version is None or source_version is None:
        message = "model_version missing on target and/or patch; port provenance incomplete"
        extra["port_warning"] = message
        logger.warning("port: %s", message)
    return _apply(updated, patch, extra)


def residual_patch(old: LoraPatch, new: LoraPatch) -> ResidualPatch:
    """Dense per-module difference delta(new) - delta(old)."""
    missing = sorted(set(old.modules) ^ set(new.modules))
    if missing:
        raise PatchCompatibilityError(
            f"patches target different module sets; symmetric difference: {', '.join(missing)}"
        )
    residuals: dict[str, np.ndarray] = {}
    for module in old.module_names():
        shape_old = old.modules[module].shape
        shape_new = new.modules[module].shape
        if shape_old != shape_new:
            raise PatchCompatibilityError(
                f"module {module!r}: delta shapes differ: {shape_old} vs {shape_new}"
            )
        residuals[module] = delta_weight(new, module) - delta_weight(old, module)
    return ResidualPatch(modules=residuals)


def extract_adapter(diff: np.ndarray, r: int) -> LoraFactors:
    """Best rank-r factorization of a dense diff via truncated SVD.

    Returns factors with b = U_r * s_r and a = V_r^T, so b @ a is the optimal
    rank-r approximation and the leftover error is sqrt(sum of the discarded
    squared singular values).
    """
    diff = check_matrix(diff, "diff")
    if r < 1 or r > min(diff.shape):
        raise ParameterError(f"rank {r} out of range [1, {min(diff.shape)}] for shape {diff.shape}")
    u, s, v = svd(diff)
    b = u[:, :r] * s[:r]
    a = v[:, :r].T
    return LoraFactors(a=np.ascontiguousarray(a), b=np.ascontiguousarray(b))
