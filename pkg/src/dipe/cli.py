"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext

import numpy as np

from dipe.attention import (
    attend,
    attend_reference,
    attend_split,
    build_masks,
    case_from_json,
    case_to_dict,
    random_case,
    result_to_dict,
)
from dipe.checks import random_segments, run_checks
from dipe.errors import DipeError
from dipe.plan import Text, build_plan, parse_segments, plan_to_json, segments_from_json
from dipe.probe import MODES, ProbeConfig, report_to_csv, report_to_json, run_probe
from dipe.rope import RopeConfig, decay_bound

TOLERANCE = {"f64": 1e-9, "f32": 1e-4}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected RxC, got {text!r}") from None
    return rows, cols


def _default_seed() -> int:
    env = os.environ.get("DIPE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DIPE_SEED must be an integer, got {env!r}") from None


def _emit(text: str, path: str | None) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _read(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def cmd_plan(args) -> int:
    if args.segments_json:
        try:
            segments = segments_from_json(json.loads(_read(args.segments_json)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"bad segments document: {exc}") from None
    else:
        segments = parse_segments(args.segments)
    plan = build_plan(segments, args.mode)
    _emit(plan_to_json(plan, indent=args.indent) + "\n", args.output)
    return 0


def cmd_attend(args) -> int:
    dtype = np.float32 if args.precision == "f32" else np.float64
    if args.case:
        case = case_from_json(_read(args.case), dtype)
    else:
        cfg = RopeConfig(args.dim, args.base)
        if args.segments:
            segments = parse_segments(args.segments)
        else:
            segments = random_segments(np.random.default_rng(args.seed), args.random)
            short = args.random - sum(seg.length for seg in segments)
            if short > 0:
                segments.append(Text(short))
        case = random_case(segments, args.heads, cfg, args.seed, dtype)
    if args.save_case:
        with open(args.save_case, "w", encoding="utf-8") as fh:
            json.dump(case_to_dict(case), fh)

    result = attend(case, args.mode)
    _emit(json.dumps(result_to_dict(result)) + "\n", args.output)
    if not args.check:
        return 0

    tol = TOLERANCE[args.precision]
    split = attend_split(case)
    ref = attend_reference(case, "dipe")
    diff = float(np.abs(split.output - ref.output).max())
    finite = np.isfinite(ref.lse)
    lse_diff = float(np.abs(split.lse[finite] - ref.lse[finite]).max()) if finite.any() else 0.0
    passed = diff <= tol and lse_diff <= tol and bool((np.isfinite(split.lse) == finite).all())
    log = sys.stderr
    print(f"tokens={len(case.plan)} heads={case.queries.shape[1]} head_dim={case.cfg.head_dim}", file=log)
    print(f"max_abs_diff_output={diff:.3e} max_abs_diff_lse={lse_diff:.3e} tol={tol:g}", file=log)
    if not build_masks(case.plan, case.causal, case.visual_bidirectional).inter.any():
        base = attend_reference(case, "baseline")
        same = bool(np.array_equal(ref.output, base.output) and np.array_equal(split.output, attend(case, "baseline").output))
        print(f"single_modality=true dipe_equals_baseline={str(same).lower()}", file=log)
        passed = passed and same
    print("PASS" if passed else "FAIL", file=log)
    return 0 if passed else 1


def cmd_decay(args) -> int:
    if args.step < 1 or args.max_dist < 0:
        raise UsageError("--step must be >= 1 and --max-dist >= 0")
    cfg = RopeConfig(args.dim, args.base)
    lines = ["distance,bound"]
    lines += [f"{dist},{decay_bound(dist, cfg)!r}" for dist in range(0, args.max_dist + 1, args.step)]
    _emit("\n".join(lines) + "\n", args.output)
    return 0


def cmd_probe(args) -> int:
    cfg = ProbeConfig(
        seed=args.seed,
        layers=args.layers,
        heads=args.heads,
        head_dim=args.dim,
        base=args.base,
        image_grid=args.grid,
        question_len=args.question_len,
        distractor_lengths=tuple(args.lengths),
        modes=tuple(args.modes),
        intra_image_mask=args.intra_image,
        precision=args.precision,
    )
    report = run_probe(cfg)
    text = report_to_json(report) + "\n" if args.format == "json" else report_to_csv(report)
    _emit(text, args.output)
    return 0


def cmd_verify(args) -> int:
    results = run_checks(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<30} {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $DIPE_SEED, then 0)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap; 1 gives bitwise reproducibility")
    common.add_argument("--precision", choices=("f64", "f32"), default="f64")
    common.add_argument("-o", "--output", default=None, help="write to this path instead of stdout")

    parser = argparse.ArgumentParser(prog="dipe", description="Distance-invariant rotary position encoding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="emit SPE/APE position plan JSON")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--segments", help='inline segments, e.g. "txt:3,img:2x2,txt:2"')
    src.add_argument("--segments-json", metavar="PATH", help="JSON list of segment objects ('-' for stdin)")
    p.add_argument("--mode", choices=("mrope", "vanilla"), default="mrope")
    p.add_argument("--indent", type=int, default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("attend", parents=[common], help="run split attention on a case; --check compares to the oracle")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--case", metavar="PATH", help="case JSON ('-' for stdin)")
    src.add_argument("--random", type=int, metavar="N", help="seeded random case of N tokens")
    p.add_argument("--segments", help="layout for --random (default: random interleaving)")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=48)
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--mode", choices=("dipe", "baseline"), default="dipe")
    p.add_argument("--check", action="store_true")
    p.add_argument("--save-case", metavar="PATH", help="also write the case JSON")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("decay", parents=[common], help="CSV of the long-range decay bound")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--max-dist", type=int, default=16384)
    p.add_argument("--step", type=int, default=256)
    p.set_defaults(func=cmd_decay)

    p = sub.add_parser("probe", parents=[common], help="synthetic visual-fading probe")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--dim", type=int, default=48)
    p.add_argument("--base", type=float, default=10000.0)
    p.add_argument("--grid", type=_grid, default=(4, 4))
    p.add_argument("--question-len", type=int, default=8)
    p.add_argument("--lengths", type=_int_list, default=[0, 64, 256, 1024, 4096])
    p.add_argument("--modes", type=lambda s: [m.strip() for m in s.split(",") if m.strip()], default=list(MODES))
    p.add_argument("--intra-image", choices=("causal", "full"), default="causal")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is None:
            args.seed = _default_seed()
        limits = nullcontext()
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            limits = threadpool_limits(limits=args.threads)
        with limits:
            return args.func(args)
    except (DipeError, UsageError) as exc:
        print(f"dipe {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
