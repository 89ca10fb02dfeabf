"""``geoatt`` command-line entry point.

Subcommands: ``kernel`` (export maps as CSV/PGM), ``gradcheck``, ``cost``,
``train`` and ``bench``. Machine-readable output goes to stdout, diagnostics
to stderr. Exit codes: 0 success, 1 check/target failure, 2 bad
configuration, 3 training divergence. ``GEOATT_SEED`` overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import gradchecks
from .costmodel import LayerConfig, cost_expatt, cost_kq, cost_pos_encoding, layers_for, measure_counts
from .expatt import expatt_forward, kq_attention_forward
from .grid_kernels import GridShape, KernelKind, KernelSpec, build_raw_kernel, normalize_with_offset
from .netblocks import ToyNetConfig, TrainingDiverged, train_toy
from .numcore import make_rng

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _seed(args) -> int:
    env = os.environ.get("GEOATT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"GEOATT_SEED must be an integer, got {env!r}") from None
    return args.seed


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


# ---------------------------------------------------------------------------
# kernel export

def format_csv(a: np.ndarray) -> str:
    # repr() is the shortest string that round-trips a float64
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in a)


def parse_csv(text: str) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in text.splitlines() if line])


def format_pgm(row: np.ndarray, shape: GridShape) -> str:
    """One attention-map row as a P2 image, scaled so the row max is 255."""
    scaled = np.rint(row / row.max() * 255).astype(int).reshape(shape.h, shape.w)
    lines = ["P2", f"{shape.w} {shape.h}", "255"]
    lines += [" ".join(str(v) for v in r) for r in scaled]
    return "\n".join(lines) + "\n"


def parse_pgm(text: str) -> np.ndarray:
    tokens = [t for line in text.splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not an ASCII PGM")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)


def cmd_kernel(args) -> int:
    try:
        kind = KernelKind(args.kind)
    except ValueError:
        raise ConfigError(f"unknown kernel kind {args.kind!r}") from None
    sigma = args.sigma
    if kind.learnable and sigma is None:
        sigma = 0.75
    try:
        shape = GridShape(args.h, args.w)
        spec = KernelSpec(kind, sigma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    att = normalize_with_offset(build_raw_kernel(shape, spec), args.offset)

    out = Path(args.out)
    files: dict[Path, str] = {}
    if args.format == "csv":
        files[out] = format_csv(att.a)
    else:
        focus = args.focus or [shape.center]
        for i in focus:
            if not 0 <= i < shape.size:
                raise ConfigError(f"focus pixel {i} outside the {shape.h}x{shape.w} grid")
            path = out if len(focus) == 1 else out.with_name(f"{out.stem}_{i}{out.suffix or '.pgm'}")
            files[path] = format_pgm(att.a[i], shape)
    try:
        for path, text in files.items():
            path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {exc.filename}: {exc.strerror}") from None
    _emit({"kind": kind.value, "h": shape.h, "w": shape.w, "sigma": spec.sigma,
           "offset": args.offset, "files": [str(p) for p in files]})
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient checks

PRESETS = {
    "desk": None,
    "quick": [c.name for c in gradchecks.CHECKS if c.name.startswith(("kernel", "attention", "expatt"))],
}


def cmd_gradcheck(args) -> int:
    hook = gradchecks.corrupt_sigma if args.corrupt_sigma_grad else (lambda name, g: g)
    results = gradchecks.run_checks(_seed(args), hook, PRESETS[args.shapes])
    checks = [{"name": k, "max_rel_error": v, "passed": v < gradchecks.TOLERANCE}
              for k, v in results.items()]
    ok = all(c["passed"] for c in checks)
    _emit({"tolerance": gradchecks.TOLERANCE, "eps": gradchecks.EPS, "checks": checks, "passed": ok})
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# cost model

def _layer_config(args, learnable: bool = True) -> LayerConfig:
    try:
        return LayerConfig(args.h, args.w, args.c, args.heads, args.d, args.dv, learnable)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cost_summary(cfg: LayerConfig, seed: int = 0) -> dict:
    shape = GridShape(cfg.h, cfg.w)
    exp_layer, kq_layer = layers_for(cfg, seed)
    kq, exp = cost_kq(cfg), cost_expatt(cfg)
    m_kq = measure_counts(kq_layer, shape)
    m_exp = measure_counts(exp_layer, shape)
    return {
        "config": {"h": cfg.h, "w": cfg.w, "c": cfg.c, "heads": cfg.n_heads, "d": cfg.d,
                   "dv": cfg.d_v, "learnable": cfg.learnable_kernel},
        "kq": kq.to_json(),
        "pos_encoding": cost_pos_encoding(cfg).to_json(),
        "expatt": exp.to_json(),
        "measured": {
            "kq": m_kq.to_json(),
            "expatt": m_exp.to_json(),
            "kq_layer_total": measure_counts(kq_layer, shape, scope="total").to_json(),
            "expatt_layer_total": measure_counts(exp_layer, shape, scope="total").to_json(),
        },
        "agree": m_kq == kq and m_exp == exp,
    }


def cmd_cost(args) -> int:
    summary = cost_summary(_layer_config(args, args.learnable))
    _emit(summary)
    return EXIT_OK if summary["agree"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# training

def cmd_train(args) -> int:
    try:
        cfg = ToyNetConfig(seed=_seed(args), steps=args.steps, lr=args.lr, momentum=args.momentum,
                           batch_size=args.batch_size, kernel=args.kernel, offset=args.offset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        report = train_toy(cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        _emit({"diverged": True, "step": exc.step})
        return EXIT_DIVERGED
    text = json.dumps(report.to_json()) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {args.out}: {exc.strerror}") from None
    final_acc = report.accuracy[-1]
    sigma = report.sigma[-1] if report.sigma else None
    _emit({"final_accuracy": final_acc, "final_loss": report.loss[-1] if report.loss else None,
           "sigma_initial": cfg.sigma0 if sigma is not None else None, "sigma_final": sigma,
           "steps": cfg.steps, "digest": report.digest, "out": args.out})
    return EXIT_OK if final_acc >= 0.90 else EXIT_FAIL


# ---------------------------------------------------------------------------
# benchmark

def _median_time(fn, iters: int) -> float:
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args) -> int:
    cfg = _layer_config(args, True)
    shape = GridShape(cfg.h, cfg.w)
    exp_layer, kq_layer = layers_for(cfg, _seed(args))
    x = make_rng(_seed(args)).standard_normal((shape.size, cfg.c))
    _emit({
        "config": {"h": cfg.h, "w": cfg.w, "c": cfg.c, "heads": cfg.n_heads, "d": cfg.d,
                   "dv": cfg.d_v, "iters": args.iters},
        "expatt": {"median_seconds": _median_time(lambda: expatt_forward(exp_layer, x, shape), args.iters),
                   "cost": cost_expatt(cfg).to_json()},
        "kq": {"median_seconds": _median_time(lambda: kq_attention_forward(kq_layer, x, shape), args.iters),
               "cost": cost_kq(cfg).to_json()},
    })
    return EXIT_OK


# ---------------------------------------------------------------------------

def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _layer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--h", type=_positive, required=True)
    p.add_argument("--w", type=_positive, required=True)
    p.add_argument("--c", type=_positive, required=True, help="input channels")
    p.add_argument("--heads", type=_positive, required=True)
    p.add_argument("--d", type=_positive, required=True, help="key/query depth per head")
    p.add_argument("--dv", type=_positive, required=True, help="value channels over all heads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoatt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kernel", help="export an attention matrix as CSV or PGM")
    p.add_argument("--kind", required=True, choices=[k.value for k in KernelKind])
    p.add_argument("--h", type=_positive, required=True)
    p.add_argument("--w", type=_positive, required=True)
    p.add_argument("--sigma", type=float, default=None, help="radius (learnable kinds; default 0.75)")
    p.add_argument("--offset", type=int, choices=(0, 1), default=1)
    p.add_argument("--format", choices=("csv", "pgm"), default="csv")
    p.add_argument("--focus", type=int, action="append", help="focus pixel for PGM (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("gradcheck", help="run the analytic gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", choices=sorted(PRESETS), default="desk")
    p.add_argument("--corrupt-sigma-grad", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cost", help="closed-form vs measured cost of attention-map construction")
    _layer_flags(p)
    p.add_argument("--learnable", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("train", help="train the toy network and record the radius")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive, default=32)
    p.add_argument("--kernel", choices=[k.value for k in KernelKind], default="gaussian")
    p.add_argument("--offset", type=int, choices=(0, 1), default=1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default=None, help="path for the JSON training report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="time explicit vs key-query attention forwards")
    _layer_flags(p)
    p.add_argument("--iters", type=_positive, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
