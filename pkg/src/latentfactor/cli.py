"""Command-line interface.

Exit codes: 0 success, 2 argument error, 3 format error, 4 numeric or plan error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .accounting import CompressionPlan, count_params_flops, solve_ranks
from .archive import TensorArchive, load_archive, save_archive
from .calibration import DEFAULT_LAMBDA_REL, Preconditioner, estimate_stats
from .errors import ArgumentError, FormatError, LatentFactorError
from .model import PRESETS, ModelConfig, forward_toy, get_preset, make_toy_model
from .pipeline import compress_model, evaluate

DEFAULT_CALIB_SEQS = 64
DEFAULT_CALIB_LEN = 128


def read_tokens(path) -> np.ndarray:
    """One sequence per line, whitespace-separated integer ids, equal lengths."""
    path = Path(path)
    if not path.is_file():
        raise ArgumentError(f"token file {path} does not exist")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([int(t) for t in line.split()])
        except ValueError:
            raise FormatError(f"{path}:{n}: token ids must be integers") from None
    if not rows:
        raise FormatError(f"{path} holds no token sequences")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: all sequences must have the same length")
    return np.array(rows, dtype=np.int64)


def write_tokens(path, tokens) -> None:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    Path(path).write_text("\n".join(" ".join(map(str, row)) for row in tokens) + "\n")


def _load_model(path):
    arc = load_archive(path)
    cfg = arc.metadata.get("config")
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: archive metadata has no model config")
    return arc, ModelConfig.from_dict(cfg)


def _calibration_tokens(args, config: ModelConfig) -> np.ndarray:
    if args.tokens:
        return read_tokens(args.tokens)
    rng = np.random.default_rng(args.seed)
    length = min(args.calib_len, config.max_pos)
    return rng.integers(0, config.vocab, size=(args.calib_seqs, length))


def cmd_toy(args):
    config = get_preset(args.preset)
    weights = make_toy_model(config, args.seed)
    arc = TensorArchive(metadata={"config": config.to_dict(), "seed": args.seed})
    for k, v in weights.items():
        arc.add(k, v, args.dtype)
    save_archive(arc, args.output)
    print(f"wrote {len(arc)} tensors to {args.output}")


def cmd_calibrate(args):
    arc, config = _load_model(args.model)
    tokens = read_tokens(args.tokens)
    trace = forward_toy(config, arc.tensors, tokens, capture=True)
    out = TensorArchive(metadata={"config": config.to_dict(), "lambda_rel": args.lambda_rel, "layers": {}})
    for name in sorted(trace.inputs):
        s = estimate_stats(trace.inputs[name], args.lambda_rel)
        out.add(f"{name}.C", s.C)
        out.add(f"{name}.C0", s.C0)
        out.add(f"{name}.mu", s.mu)
        out.metadata["layers"][name] = {"sample_len": s.sample_len, "lambda": s.lam}
    save_archive(out, args.output)
    print(f"wrote statistics for {len(trace.inputs)} module inputs to {args.output}")


def cmd_compress(args):
    arc, config = _load_model(args.model)
    plan = solve_ranks(
        config,
        args.ratio,
        junction=args.junction,
        joint_qk=args.joint_qk,
        joint_vo=args.joint_vo,
        joint_ud=args.joint_ud,
        bias_aware=args.bias_aware,
        rope_aware=args.rope,
        preconditioner=args.precond,
        iters_qk=args.iters_qk,
        iters_ud=args.iters_ud,
        lambda_rel=args.lambda_rel,
        seed=args.seed,
    )
    tokens = _calibration_tokens(args, config)
    weights, report = compress_model(arc.tensors, config, plan, tokens)
    out = TensorArchive(
        metadata={"config": config.to_dict(), "plan": plan.to_dict(), "report": report.to_dict()}
    )
    for k, v in weights.items():
        out.add(k, v, arc.dtypes.get(k, "f64"))
    save_archive(out, args.output)
    Path(args.output, "report.json").write_text(report.to_json())
    print(report.table())


def cmd_report(args):
    arc = load_archive(args.archive)
    meta = arc.metadata
    if "config" not in meta:
        raise FormatError(f"{args.archive}: archive metadata has no model config")
    config = ModelConfig.from_dict(meta["config"])
    plan = CompressionPlan.from_dict(meta["plan"]) if meta.get("plan") else None
    report = count_params_flops(config, plan, args.tokens)
    stored = meta.get("report") or {}
    report.layer_losses = stored.get("layer_losses", {})
    report.wall_time = stored.get("wall_time", 0.0)
    print(report.to_json())
    print(report.table())


def cmd_evaluate(args):
    a, config = _load_model(args.original)
    b, config_b = _load_model(args.compressed)
    if config_b != config:
        raise ArgumentError("the two archives describe different model configs")
    tokens = read_tokens(args.tokens)
    print(json.dumps(evaluate(a.tensors, b.tensors, config, tokens), indent=1, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentfactor",
        description="Activation-aware low-rank and latent-attention compression of toy transformers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="write a seeded random toy model archive")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--preset", default="toy", choices=sorted(k for k in PRESETS if k.startswith("toy")))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=["f32", "f64"])
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("calibrate", help="capture activation statistics of every linear input")
    p.add_argument("model")
    p.add_argument("tokens")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--lambda-rel", type=float, default=DEFAULT_LAMBDA_REL)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("compress", help="compress a model to a target ratio")
    p.add_argument("model")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--precond", default="rootcov", choices=[k.value for k in Preconditioner])
    p.add_argument("--junction", default="block-identity", choices=["dense", "block-identity", "lu"])
    p.add_argument("--joint-qk", action="store_true")
    p.add_argument("--joint-ud", action="store_true")
    p.add_argument("--joint-vo", action="store_true")
    p.add_argument("--bias-aware", action="store_true")
    p.add_argument("--rope", action="store_true", help="rotary-aware joint QK (needs --joint-qk)")
    p.add_argument("--iters-qk", type=int, default=8)
    p.add_argument("--iters-ud", type=int, default=4)
    p.add_argument("--lambda-rel", type=float, default=DEFAULT_LAMBDA_REL)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tokens", help="calibration token file (default: seeded random tokens)")
    p.add_argument("--calib-seqs", type=int, default=DEFAULT_CALIB_SEQS)
    p.add_argument("--calib-len", type=int, default=DEFAULT_CALIB_LEN)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("report", help="parameter and FLOPs report of an archive")
    p.add_argument("archive")
    p.add_argument("--tokens", type=int, default=128, help="token length for the FLOPs count")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("evaluate", help="compare original and compressed models on tokens")
    p.add_argument("original")
    p.add_argument("compressed")
    p.add_argument("tokens")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "rope", False) and not args.joint_qk:
            raise ArgumentError("--rope needs --joint-qk")
        args.func(args)
    except LatentFactorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
