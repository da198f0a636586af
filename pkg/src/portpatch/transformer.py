"""Minimal deterministic transformer forward pass used as an equivalence oracle.

The engine exists to check that materializing a low-rank patch into the
weights and applying it on the fly produce the same logits. It is inference
only: post-LN decoder blocks, no positional encodings, no dropout, no
sampling. Weights live in a Checkpoint under the naming schema

    layers.{l}.attn.{q|k|v|o}.weight   (d, d)
    layers.{l}.ffn.up.weight           (d, d_ff)      layers.{l}.ffn.up.bias   (d_ff,)
    layers.{l}.ffn.down.weight         (d_ff, d)      layers.{l}.ffn.down.bias (d,)
    layers.{l}.{ln1|ln2}.{gain|bias}   (d,)
    embed.weight                       (vocab, d)
    head.weight                        (d, vocab)

and weight matrices multiply activations on the right (out = x @ w).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .container import Checkpoint
from .errors import ConfigError, InputError, MergeError
from .kernels import layer_norm_rows, matmul, softmax_rows
from .patch import LoraPatch, resolve_module

LN_EPS = 1e-6

ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    vocab_size: int
    n_max: int = 128
    activation: str = "gelu"
    causal: bool = True

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.n_max) < 1:
            raise ConfigError("all transformer dimensions must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads {self.n_heads} does not divide d_model {self.d_model}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def expected_weight_shapes(cfg: TransformerConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (cfg.vocab_size, cfg.d_model),
        "head.weight": (cfg.d_model, cfg.vocab_size),
    }
    for layer in range(cfg.n_layers):
        prefix = f"layers.{layer}"
        for name in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.{name}.weight"] = (cfg.d_model, cfg.d_model)
        shapes[f"{prefix}.ffn.up.weight"] = (cfg.d_model, cfg.d_ff)
        shapes[f"{prefix}.ffn.up.bias"] = (cfg.d_ff,)
        shapes[f"{prefix}.ffn.down.weight"] = (cfg.d_ff, cfg.d_model)
        shapes[f"{prefix}.ffn.down.bias"] = (cfg.d_model,)
        for ln in ("ln1", "ln2"):
            shapes[f"{prefix}.{ln}.gain"] = (cfg.d_model,)
            shapes[f"{prefix}.{ln}.bias"] = (cfg.d_model,)
    return shapes


def validate_weights(cfg: TransformerConfig, weights: Checkpoint) -> None:
    expected = expected_weight_shapes(cfg)
    for name, shape in expected.items():
        if name not in weights.tensors:
            raise ConfigError(f"weights missing tensor {name!r}")
        actual = weights.tensors[name].shape
        if actual != shape:
            raise ConfigError(f"tensor {name!r} has shape {actual}, expected {shape}")


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    work = x.astype(np.float64, copy=False)
    if kind == "relu":
        out = np.maximum(work, 0.0)
    else:
        out = 0.5 * work * (1.0 + erf(work / np.sqrt(2.0)))
    return out.astype(x.dtype, copy=False)


def _add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a.astype(np.float64, copy=False) + b.astype(np.float64, copy=False)
    return out.astype(a.dtype, copy=False)


def _causal_mask(n: int) -> np.ndarray:
    mask = np.zeros((n, n), dtype=np.float64)
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _scores_to_weights(q: np.ndarray, k: np.ndarray, head_dim: int, causal: bool) -> np.ndarray:
    scores = matmul(q, np.ascontiguousarray(k.T)).astype(np.float64, copy=False)
    scores = scores / np.sqrt(float(head_dim))
    if causal:
        scores = scores + _causal_mask(scores.shape[0])
    return softmax_rows(scores.astype(q.dtype, copy=False))


def attention_head(
    x: np.ndarray,
    wq_i: np.ndarray,
    wk_i: np.ndarray,
    wv_i: np.ndarray,
    causal: bool = True,
) -> np.ndarray:
    """Scaled dot-product attention for one head with (d, head_dim) projections."""
    q = matmul(x, wq_i)
    k = matmul(x, wk_i)
    v = matmul(x, wv_i)
    return matmul(_scores_to_weights(q, k, wq_i.shape[1], causal), v)


def _mha_from_projections(
    q_full: np.ndarray,
    k_full: np.ndarray,
    v_full: np.ndarray,
    cfg: TransformerConfig,
    project_out,
) -> np.ndarray:
    dh = cfg.head_dim
    heads = []
    for h in range(cfg.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        q = np.ascontiguousarray(q_full[:, cols])
        k = np.ascontiguousarray(k_full[:, cols])
        v = np.ascontiguousarray(v_full[:, cols])
        heads.append(matmul(_scores_to_weights(q, k, dh, cfg.causal), v))
    return project_out(np.ascontiguousarray(np.concatenate(heads, axis=1)))


def multi_head_attention(
    x: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    cfg: TransformerConfig,
) -> np.ndarray:
    """Packed multi-head attention: project with (d, d) matrices, slice per head."""
    return _mha_from_projections(
        matmul(x, wq),
        matmul(x, wk),
        matmul(x, wv),
        cfg,
        lambda concat: matmul(concat, wo),
    )


def feed_forward(
    x: np.ndarray,
    w_up: np.ndarray,
    b1: np.ndarray,
    w_down: np.ndarray,
    b2: np.ndarray,
    activation: str = "gelu",
) -> np.ndarray:
    """Position-wise FFN: activation(x @ w_up + b1) @ w_down + b2."""
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    hidden = matmul(x, w_up)
    hidden = (hidden.astype(np.float64, copy=False) + b1.astype(np.float64, copy=False)).astype(
        x.dtype, copy=False
    )
    hidden = _activate(hidden, activation)
    out = matmul(hidden, w_down)
    return (out.astype(np.float64, copy=False) + b2.astype(np.float64, copy=False)).astype(
        x.dtype, copy=False
    )


PATCHABLE_SUFFIXES = (
    ".attn.q.weight",
    ".attn.k.weight",
    ".attn.v.weight",
    ".attn.o.weight",
    ".ffn.up.weight",
    ".ffn.down.weight",
)


def _adapter_table(
    weights: Checkpoint, patch: LoraPatch | None, dtype
) -> dict[str, tuple[np.ndarray, np.ndarray, float]]:
    if patch is None:
        return {}
    table: dict[str, tuple[np.ndarray, np.ndarray, float]] = {}
    for module in patch.module_names():
        name = resolve_module(weights, module)
        if not (name.startswith("layers.") and name.endswith(PATCHABLE_SUFFIXES)):
            raise MergeError(
                f"module {module!r} resolves to {name!r}, which is not an "
                "attention or feed-forward projection weight"
            )
        factors = patch.modules[module]
        if factors.shape != weights.tensors[name].shape:
            raise MergeError(
                f"module {module!r}: delta shape {factors.shape} does not match "
                f"tensor {name!r} shape {weights.tensors[name].shape}"
            )
        table[name] = (
            factors.a.astype(dtype, copy=False),
            factors.b.astype(dtype, copy=False),
            patch.scaling,
        )
    return table


def _check_tokens(cfg: TransformerConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim != 1 or toks.size == 0:
        raise InputError(f"tokens must be a non-empty 1-D sequence, got shape {toks.shape}")
    if not np.issubdtype(toks.dtype, np.integer):
        raise InputError(f"tokens must be integers, got dtype {toks.dtype}")
    if toks.size > cfg.n_max:
        raise InputError(f"sequence length {toks.size} exceeds n_max {cfg.n_max}")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        raise InputError(
            f"token ids must lie in [0, {cfg.vocab_size}), got range "
            f"[{toks.min()}, {toks.max()}]"
        )
    return toks


def _forward_impl(
    weights: Checkpoint,
    cfg: TransformerConfig,
    tokens,
    adapters: dict[str, tuple[np.ndarray, np.ndarray, float]],
) -> np.ndarray:
    validate_weights(cfg, weights)
    toks = _check_tokens(cfg, tokens)

    def project(x: np.ndarray, name: str) -> np.ndarray:
        out = matmul(x, weights.tensors[name])
        if name in adapters:
            a, b, scaling = adapters[name]
            extra = matmul(matmul(x, b), a).astype(np.float64, copy=False) * scaling
            out = (out.astype(np.float64, copy=False) + extra).astype(x.dtype, copy=False)
        return out

    x = np.ascontiguousarray(weights.tensors["embed.weight"][toks])
    for layer in range(cfg.n_layers):
        prefix = f"layers.{layer}"
        attn_out = _mha_from_projections(
            project(x, f"{prefix}.attn.q.weight"),
            project(x, f"{prefix}.attn.k.weight"),
            project(x, f"{prefix}.attn.v.weight"),
            cfg,
            lambda concat: project(concat, f"{prefix}.attn.o.weight"),
        )
        x = layer_norm_rows(
            _add(x, attn_out),
            weights.tensors[f"{prefix}.ln1.gain"],
            weights.tensors[f"{prefix}.ln1.bias"],
            LN_EPS,
        )
        hidden = project(x, f"{prefix}.ffn.up.weight")
        hidden = (
            hidden.astype(np.float64, copy=False)
            + weights.tensors[f"{prefix}.ffn.up.bias"].astype(np.float64, copy=False)
        ).astype(x.dtype, copy=False)
        hidden = _activate(hidden, cfg.activation)
        ffn_out = project(hidden, f"{prefix}.ffn.down.weight")
        ffn_out = (
            ffn_out.astype(np.float64, copy=False)
            + weights.tensors[f"{prefix}.ffn.down.bias"].astype(np.float64, copy=False)
        ).astype(x.dtype, copy=False)
        x = layer_norm_rows(
            _add(x, ffn_out),
            weights.tensors[f"{prefix}.ln2.gain"],
            weights.tensors[f"{prefix}.ln2.bias"],
            LN_EPS,
        )
    return matmul(x, weights.tensors["head.weight"])


def forward(weights: Checkpoint, cfg: TransformerConfig, tokens) -> np.ndarray:
    """Token ids -> (n, vocab) logits; deterministic for fixed weights and tokens."""
    return _forward_impl(weights, cfg, tokens, adapters={})


def forward_with_patch(
    base: Checkpoint, patch: LoraPatch, cfg: TransformerConfig, tokens
) -> np.ndarray:
    """Forward pass applying the patch on the fly as two narrow matmuls per target.

    Numerically equivalent to forward(merge(base, patch)) without materializing
    any dense delta; patch factors are cast to the activation dtype.
    """
    adapters = _adapter_table(base, patch, base.tensors["embed.weight"].dtype)
    return _forward_impl(base, cfg, tokens, adapters=adapters)


def random_weights(cfg: TransformerConfig, seed: int, dtype=np.float64) -> Checkpoint:
    """Seeded weights for oracle runs: one Philox stream, fixed draw order."""
    rng = np.random.Generator(np.random.Philox(seed))
    dtype = np.dtype(dtype)
    sd = 1.0 / np.sqrt(cfg.d_model)

    def draw(shape, std):
        return rng.normal(0.0, std, size=shape).astype(dtype, copy=False)

    tensors: dict[str, np.ndarray] = {
        "embed.weight": draw((cfg.vocab_size, cfg.d_model), 1.0),
        "head.weight": draw((cfg.d_model, cfg.vocab_size), sd),
    }
    for layer in range(cfg.n_layers):
        prefix = f"layers.{layer}"
        for name in ("q", "k", "v", "o"):
            tensors[f"{prefix}.attn.{name}.weight"] = draw((cfg.d_model, cfg.d_model), sd)
        tensors[f"{prefix}.ffn.up.weight"] = draw((cfg.d_model, cfg.d_ff), sd)
        tensors[f"{prefix}.ffn.up.bias"] = draw((cfg.d_ff,), 0.1)
        tensors[f"{prefix}.ffn.down.weight"] = draw((cfg.d_ff, cfg.d_model), 1.0 / np.sqrt(cfg.d_ff))
        tensors[f"{prefix}.ffn.down.bias"] = draw((cfg.d_model,), 0.1)
        for ln in ("ln1", "ln2"):
            tensors[f"{prefix}.{ln}.gain"] = np.ones(cfg.d_model, dtype=dtype)
            tensors[f"{prefix}.{ln}.bias"] = np.zeros(cfg.d_model, dtype=dtype)
    metadata = {"model_version": f"tiny-{seed}"}
    return Checkpoint(tensors=tensors, metadata=metadata)
