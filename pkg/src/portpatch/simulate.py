"""Synthetic model-evolution cycle at desk scale.

Builds a base checkpoint, a continued-pretraining update on top of it, and a
pair of genuinely fitted low-rank personalization patches: one against the
base, one against the updated model, both chasing the same planted task
direction. Personalization is least-squares fitting of a single linear
module; that keeps exactly the objects the rank/norm diagnostics need while
staying far below LLM scale.

Every random draw comes from a Philox stream keyed by (config seed << 4) | role,
so a config reproduces its quadruple bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .container import Checkpoint, atomic_write_bytes, write_adapter, write_container
from .errors import ConfigError, FitError, NumericalError
from .kernels import fro_norm, numerical_rank
from .patch import LoraFactors, LoraPatch, delta_weight, merge

MODULE_NAME = "linear"
TENSOR_NAME = MODULE_NAME + ".weight"

ADAPTER_INIT_STD = 0.01

# Roles for deriving per-purpose seeds from the config seed.
ROLE_THETA = 0
ROLE_CP_B = 1
ROLE_CP_A = 2
ROLE_TASK = 3
ROLE_SAMPLE_OLD = 4
ROLE_SAMPLE_NEW = 5
ROLE_INIT_OLD = 6
ROLE_INIT_NEW = 7


def sub_seed(seed: int, role: int) -> int:
    return (seed << 4) | role


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class SimConfig:
    dim: int = 256
    rank_cp: int = 64
    alpha_cp: float = 128.0
    rank_ds: int = 8
    alpha_ds: float = 8.0
    base_scale: float = 0.0625
    cp_scale: float = 0.02
    task_rank: int = 4
    task_scale: float = 1.0
    noise_std: float = 0.05
    samples: int = 512
    fit_steps: int = 300
    fit_lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            caster = int if f.name in _INT_FIELDS else float
            setattr(self, f.name, caster(getattr(self, f.name)))
        self.validate()

    def validate(self) -> None:
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if not (1 <= self.rank_ds < self.rank_cp <= self.dim):
            raise ConfigError(
                f"ranks must satisfy 1 <= rank_ds < rank_cp <= dim, "
                f"got rank_ds={self.rank_ds} rank_cp={self.rank_cp} dim={self.dim}"
            )
        if not (1 <= self.task_rank <= self.rank_ds):
            raise ConfigError(
                f"task_rank must lie in [1, rank_ds], got {self.task_rank}"
            )
        if self.base_scale <= 0 or self.cp_scale <= 0:
            raise ConfigError("base_scale and cp_scale must be > 0")
        # task_scale / noise_std may be zero to model a null task or a clean fit.
        if self.task_scale < 0 or self.noise_std < 0:
            raise ConfigError("task_scale and noise_std must be >= 0")
        if self.alpha_cp <= 0 or self.alpha_ds <= 0:
            raise ConfigError("alpha_cp and alpha_ds must be > 0")
        if self.samples < self.dim:
            raise ConfigError(f"samples ({self.samples}) must be >= dim ({self.dim})")
        if self.fit_steps < 0:
            raise ConfigError(f"fit_steps must be >= 0, got {self.fit_steps}")
        if self.fit_lr <= 0:
            raise ConfigError(f"fit_lr must be > 0, got {self.fit_lr}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


_INT_FIELDS = {f.name for f in dataclasses.fields(SimConfig) if f.type == "int"}


def parse_sim_config(text: str) -> SimConfig:
    """Parse the flat `key = value` config format; unset keys keep defaults."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in {f.name for f in dataclasses.fields(SimConfig)}:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = int(value) if key in _INT_FIELDS else float(value)
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad value {value!r} for {key!r}") from exc
    return SimConfig(**values)


def format_sim_config(cfg: SimConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)!r}" for f in dataclasses.fields(SimConfig)]
    return "\n".join(lines) + "\n"


def load_sim_config(path: str) -> SimConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return parse_sim_config(handle.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


@dataclass
class TaskDataset:
    """Inputs, regression targets, and the planted low-rank task direction."""

    x: np.ndarray
    y: np.ndarray
    planted: np.ndarray


@dataclass
class FitResult:
    factors: LoraFactors
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


@dataclass
class SimQuadruple:
    theta: Checkpoint
    theta_prime: Checkpoint
    patch_old: LoraPatch
    patch_new: LoraPatch
    provenance: dict


def gen_base_and_update(cfg: SimConfig) -> tuple[Checkpoint, Checkpoint, LoraPatch]:
    """Base weights, the continued-pretraining patch, and their merge."""
    d = cfg.dim
    theta_w = _rng(sub_seed(cfg.seed, ROLE_THETA)).normal(0.0, cfg.base_scale, size=(d, d))
    b_cp = _rng(sub_seed(cfg.seed, ROLE_CP_B)).normal(0.0, cfg.cp_scale, size=(d, cfg.rank_cp))
    a_cp = _rng(sub_seed(cfg.seed, ROLE_CP_A)).normal(0.0, cfg.cp_scale, size=(cfg.rank_cp, d))

    base_version = f"sim-base-{cfg.seed}"
    updated_version = f"sim-updated-{cfg.seed}"
    theta = Checkpoint(
        tensors={TENSOR_NAME: theta_w},
        metadata={"model_version": base_version},
    )
    cp_patch = LoraPatch(
        modules={MODULE_NAME: LoraFactors(a=a_cp, b=b_cp)},
        rank=cfg.rank_cp,
        alpha=cfg.alpha_cp,
        metadata={"model_version": base_version},
    )
    theta_prime = merge(theta, cp_patch)
    theta_prime.metadata["model_version"] = updated_version

    rank_before = numerical_rank(theta.tensors[TENSOR_NAME])
    rank_after = numerical_rank(theta_prime.tensors[TENSOR_NAME])
    if rank_after < rank_before:
        raise NumericalError(
            f"updated weights lost rank: {rank_after} < {rank_before} (seed {cfg.seed})"
        )
    return theta, theta_prime, cp_patch


def gen_task(cfg: SimConfig, w_ref: np.ndarray, task_seed: int, sample_seed: int) -> TaskDataset:
    """Regression data y = x @ (w_ref + planted) + noise.

    The planted direction depends only on task_seed, so the same task can be
    posed against different reference weights; inputs and noise come from
    sample_seed.
    """
    d = cfg.dim
    task_rng = _rng(task_seed)
    gu = task_rng.normal(0.0, 1.0, size=(d, cfg.task_rank))
    gv = task_rng.normal(0.0, 1.0, size=(cfg.task_rank, d))
    if cfg.task_scale == 0.0:
        planted = np.zeros((d, d))
    else:
        planted = gu @ gv
        planted *= cfg.task_scale / fro_norm(planted)
    sample_rng = _rng(sample_seed)
    x = sample_rng.normal(0.0, 1.0, size=(cfg.samples, d))
    noise = sample_rng.normal(0.0, cfg.noise_std, size=(cfg.samples, d))
    y = x @ (w_ref.astype(np.float64, copy=False) + planted) + noise
    return TaskDataset(x=x, y=y, planted=planted)


def fit_adapter(
    w: np.ndarray,
    task: TaskDataset,
    r: int,
    alpha: float,
    steps: int,
    lr: float,
    init_seed: int,
) -> FitResult:
    """Gradient descent on factor pair (b, a) for min (1/m)||x @ (w + s*b@a) - y||_F^2.

    b starts at zero so step 0 is a no-op patch; a starts from a small seeded
    normal. Loss is recorded before every update plus once at the end.
    """
    if not (1 <= r <= min(w.shape)):
        raise ConfigError(f"adapter rank {r} out of range [1, {min(w.shape)}]")
    w = w.astype(np.float64, copy=False)
    x = task.x
    y = task.y
    m = x.shape[0]
    s = alpha / r
    a = _rng(init_seed).normal(0.0, ADAPTER_INIT_STD, size=(r, w.shape[1]))
    b = np.zeros((w.shape[0], r))
    base = x @ w
    losses: list[float] = []
    # divergence shows up as a non-finite loss; the checks below turn it into
    # a FitError, so numpy's overflow warnings are redundant here
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            p = base + s * ((x @ b) @ a) - y
            loss = float(np.sum(p * p)) / m
            if not np.isfinite(loss):
                raise FitError(f"fitting diverged at step {step} (loss {loss})")
            losses.append(loss)
            grad_b = (2.0 * s / m) * (x.T @ (p @ a.T))
            grad_a = (2.0 * s / m) * ((b.T @ x.T) @ p)
            b = b - lr * grad_b
            a = a - lr * grad_a
        p = base + s * ((x @ b) @ a) - y
        final = float(np.sum(p * p)) / m
    if not np.isfinite(final):
        raise FitError(f"fitting diverged at step {steps} (loss {final})")
    losses.append(final)
    return FitResult(factors=LoraFactors(a=a, b=b), losses=losses)


def run_cycle(cfg: SimConfig) -> SimQuadruple:
    """One full evolution-and-personalization cycle for a config."""
    theta, theta_prime, cp_patch = gen_base_and_update(cfg)
    task_seed = sub_seed(cfg.seed, ROLE_TASK)

    fits: dict[str, FitResult] = {}
    patches: dict[str, LoraPatch] = {}
    for tag, ckpt, sample_role, init_role in (
        ("old", theta, ROLE_SAMPLE_OLD, ROLE_INIT_OLD),
        ("new", theta_prime, ROLE_SAMPLE_NEW, ROLE_INIT_NEW),
    ):
        w = ckpt.tensors[TENSOR_NAME]
        task = gen_task(cfg, w, task_seed, sub_seed(cfg.seed, sample_role))
        result = fit_adapter(
            w, task, cfg.rank_ds, cfg.alpha_ds, cfg.fit_steps, cfg.fit_lr,
            sub_seed(cfg.seed, init_role),
        )
        fits[tag] = result
        patches[tag] = LoraPatch(
            modules={MODULE_NAME: result.factors},
            rank=cfg.rank_ds,
            alpha=cfg.alpha_ds,
            metadata={"model_version": ckpt.metadata["model_version"]},
        )

    provenance = {
        "config": dataclasses.asdict(cfg),
        "seeds": {
            "theta": sub_seed(cfg.seed, ROLE_THETA),
            "cp_b": sub_seed(cfg.seed, ROLE_CP_B),
            "cp_a": sub_seed(cfg.seed, ROLE_CP_A),
            "task": task_seed,
            "sample_old": sub_seed(cfg.seed, ROLE_SAMPLE_OLD),
            "sample_new": sub_seed(cfg.seed, ROLE_SAMPLE_NEW),
            "init_old": sub_seed(cfg.seed, ROLE_INIT_OLD),
            "init_new": sub_seed(cfg.seed, ROLE_INIT_NEW),
        },
        "final_loss_old": fits["old"].final_loss,
        "final_loss_new": fits["new"].final_loss,
    }
    quad = SimQuadruple(
        theta=theta,
        theta_prime=theta_prime,
        patch_old=patches["old"],
        patch_new=patches["new"],
        provenance=provenance,
    )
    _check_quadruple(cfg, quad, cp_patch)
    return quad


def _check_quadruple(cfg: SimConfig, quad: SimQuadruple, cp_patch: LoraPatch) -> None:
    expected = quad.theta.tensors[TENSOR_NAME] + delta_weight(cp_patch, MODULE_NAME)
    drift = float(np.max(np.abs(expected - quad.theta_prime.tensors[TENSOR_NAME])))
    if drift > 1e-9:
        raise NumericalError(f"theta_prime deviates from theta + delta by {drift}")
    for patch in (quad.patch_old, quad.patch_new):
        if patch.rank != cfg.rank_ds:
            raise NumericalError(f"patch rank {patch.rank} != configured {cfg.rank_ds}")


def persist_quadruple(quad: SimQuadruple, out_dir: str) -> dict[str, str]:
    """Write the four containers plus provenance.json; returns the path map."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "theta": os.path.join(out_dir, "theta.safetensors"),
        "theta_prime": os.path.join(out_dir, "theta_prime.safetensors"),
        "patch_old": os.path.join(out_dir, "patch_old.safetensors"),
        "patch_new": os.path.join(out_dir, "patch_new.safetensors"),
        "provenance": os.path.join(out_dir, "provenance.json"),
    }
    write_container(paths["theta"], quad.theta)
    write_container(paths["theta_prime"], quad.theta_prime)
    write_adapter(paths["patch_old"], quad.patch_old)
    write_adapter(paths["patch_new"], quad.patch_new)
    text = json.dumps(quad.provenance, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(paths["provenance"], text.encode("utf-8"))
    return paths
