"""Command line surface: inspect, merge, port, diff, extract, diagnose, simulate.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical error.
Errors print a single machine-readable line `ERROR(<category>): message` to
stderr. Input paths are validated before any output file is created, and all
outputs are written atomically.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ._version import __version__
from .container import (
    DTYPE_TAGS,
    Checkpoint,
    atomic_write_bytes,
    read_adapter,
    read_container,
    write_adapter,
    write_container,
)
from .diagnostics import canonical_json, negligibility_report, render_report
from .errors import PortPatchError, ShapeError, UsageError
from .patch import LoraFactors, LoraPatch, extract_adapter, merge, port
from .simulate import SimConfig, load_sim_config, persist_quadruple, run_cycle

EXIT_CODES = {"usage": 1, "data": 2, "numerical": 3}

THREADS_ENV = "PORTPATCH_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _require_inputs(*paths: str) -> None:
    for path in paths:
        if not os.path.isfile(path):
            raise UsageError(f"input file not found: {path}")


def _write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise UsageError(f"{THREADS_ENV} must be a non-negative integer, got {raw!r}") from exc
    if value < 0:
        raise UsageError(f"{THREADS_ENV} must be a non-negative integer, got {value}")
    return value or 1


def cmd_inspect(args) -> int:
    _require_inputs(args.file)
    ckpt = read_container(args.file)
    print(f"container: {args.file}")
    print("metadata:")
    if ckpt.metadata:
        for key in sorted(ckpt.metadata):
            print(f"  {key}: {ckpt.metadata[key]}")
    else:
        print("  (none)")
    print(f"tensors ({len(ckpt.tensors)}):")
    for name, tensor in ckpt.tensors.items():
        tag = DTYPE_TAGS[tensor.dtype]
        print(f"  {name}  {tag}  {tensor.shape}")
    return 0


def cmd_merge(args) -> int:
    _require_inputs(args.base, args.adapter)
    base = read_container(args.base)
    patch = read_adapter(args.adapter)
    write_container(args.out, merge(base, patch))
    return 0


def cmd_port(args) -> int:
    _require_inputs(args.updated, args.patch)
    updated = read_container(args.updated)
    patch = read_adapter(args.patch)
    write_container(args.out, port(updated, patch))
    return 0


def cmd_diff(args) -> int:
    _require_inputs(args.a, args.b)
    ckpt_a = read_container(args.a)
    ckpt_b = read_container(args.b)
    if ckpt_a.names() != ckpt_b.names():
        only_a = sorted(set(ckpt_a.names()) - set(ckpt_b.names()))
        only_b = sorted(set(ckpt_b.names()) - set(ckpt_a.names()))
        raise ShapeError(
            f"checkpoints have different tensor sets; only in a: {only_a}, only in b: {only_b}"
        )
    tensors: dict[str, np.ndarray] = {}
    for name, ta in ckpt_a.tensors.items():
        tb = ckpt_b.tensors[name]
        if ta.shape != tb.shape or ta.dtype != tb.dtype:
            raise ShapeError(
                f"tensor {name!r}: shape/dtype mismatch "
                f"{ta.shape}/{ta.dtype} vs {tb.shape}/{tb.dtype}"
            )
        diff = ta.astype(np.float64, copy=False) - tb.astype(np.float64, copy=False)
        tensors[name] = diff.astype(ta.dtype, copy=False)
    metadata = {
        "model_version": "diff",
        "diff_a_version": ckpt_a.metadata.get("model_version", "<unknown>"),
        "diff_b_version": ckpt_b.metadata.get("model_version", "<unknown>"),
    }
    write_container(args.out, Checkpoint(tensors=tensors, metadata=metadata))
    return 0


def cmd_extract(args) -> int:
    _require_inputs(args.diff)
    ckpt = read_container(args.diff)
    modules: dict[str, LoraFactors] = {}
    for name, tensor in ckpt.tensors.items():
        if tensor.ndim != 2:
            raise ShapeError(
                f"tensor {name!r} has rank {tensor.ndim}; extract needs 2-D weight diffs only"
            )
        module = name[: -len(".weight")] if name.endswith(".weight") else name
        if module in modules:
            raise ShapeError(f"module path {module!r} maps to more than one tensor")
        modules[module] = extract_adapter(tensor, args.rank)
    patch = LoraPatch(
        modules=modules,
        rank=args.rank,
        alpha=float(args.rank),
        metadata={"model_version": ckpt.metadata.get("diff_a_version", "<unknown>")},
    )
    write_adapter(args.out, patch)
    return 0


def cmd_diagnose(args) -> int:
    _require_inputs(args.updated, args.patch_old, args.patch_new)
    updated = read_container(args.updated)
    patch_old = read_adapter(args.patch_old)
    patch_new = read_adapter(args.patch_new)
    report = negligibility_report(updated, patch_old, patch_new)
    fmt = "json" if args.format == "json" else "markdown"
    text = render_report(report, fmt)
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _simulate_one(cfg: SimConfig, out_dir: str):
    quad = run_cycle(cfg)
    seed_dir = os.path.join(out_dir, f"seed_{cfg.seed:05d}")
    persist_quadruple(quad, seed_dir)
    report = negligibility_report(quad.theta_prime, quad.patch_old, quad.patch_new)
    _write_text(os.path.join(seed_dir, "report.json"), render_report(report, "json"))
    return cfg.seed, report


def cmd_simulate(args) -> int:
    _require_inputs(args.config)
    if args.seeds < 1:
        raise UsageError(f"--seeds must be >= 1, got {args.seeds}")
    cfg = load_sim_config(args.config)
    configs = [cfg.replace(seed=cfg.seed + i) for i in range(args.seeds)]
    workers = min(_thread_count(), len(configs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda c: _simulate_one(c, args.out_dir), configs))
    else:
        results = [_simulate_one(c, args.out_dir) for c in configs]

    per_seed = {}
    for seed, report in results:
        per_seed[str(seed)] = {
            "aggregate_ratio_sigma": report.aggregate.ratio_sigma,
            "aggregate_ratio_fro": report.aggregate.ratio_fro,
            "mean_ratio_sigma": report.mean_ratio_sigma,
            "mean_ratio_fro": report.mean_ratio_fro,
        }
    combined = {
        "seeds": per_seed,
        "min_aggregate_ratio_sigma": min(r.aggregate.ratio_sigma for _, r in results),
        "min_aggregate_ratio_fro": min(r.aggregate.ratio_fro for _, r in results),
        "tool_version": __version__,
    }
    _write_text(os.path.join(args.out_dir, "report.json"), canonical_json(combined))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="portpatch", description=__doc__)
    parser.add_argument("--version", action="version", version=f"portpatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="list tensor names, dtypes, shapes and metadata")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("merge", help="materialize an adapter into a base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("port", help="add an older patch onto an updated checkpoint")
    p.add_argument("--updated", required=True)
    p.add_argument("--patch", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_port)

    p = sub.add_parser("diff", help="per-tensor dense difference a - b")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("extract", help="compress a dense diff into a rank-r adapter")
    p.add_argument("--diff", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("diagnose", help="naive-update vs residual magnitude report")
    p.add_argument("--updated", required=True)
    p.add_argument("--patch-old", dest="patch_old", required=True)
    p.add_argument("--patch-new", dest="patch_new", required=True)
    p.add_argument("--format", choices=("json", "md"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="run seeded evolution cycles and report ratios")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"ERROR(usage): {exc}", file=sys.stderr)
        return 1
    except PortPatchError as exc:
        category = exc.category
        print(f"ERROR({category}): {exc}", file=sys.stderr)
        return EXIT_CODES.get(category, 2)
    except OSError as exc:
        print(f"ERROR(data): {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
