"""``sigmaseg`` command-line interface.

Exit codes: 0 success, 1 numeric/validation failure (JSON diagnostic on
stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import analysis, checks, io
from .errors import SigmaError
from .model import count_params, forward, init_weights, labels_from_logits
from .flops import model_flops

# bench thresholds: linear scan vs quadratic attention under length doubling
SCAN_DOUBLING_MAX = 2.6
SCAN_DOUBLING_FROM = 4096
ATTENTION_DOUBLING_MIN = 3.0
ATTENTION_DOUBLING_FROM = 1024


class CommandFailed(Exception):
    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


def _fail_json(kind, message, **details):
    payload = {k: v for k, v in details.items() if v is not None}
    payload.update(error=kind, message=message)
    print(json.dumps(payload, sort_keys=True, default=str), file=sys.stderr)
    return 1


# --------------------------------------------------------------------------
# subcommands


def cmd_scan_check(args):
    results = checks.scan_check(args.seed, args.cases, args.max_len, args.tol)
    ok = True
    for name, (n, err, passed) in checks.summarize(results).items():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:22s} cases={n:4d} max_rel_err={err:.3e}")
    if not ok:
        worst = max(results, key=lambda r: r.error)
        raise CommandFailed("oracle mismatch", check=worst.name, case=worst.case, max_rel_error=worst.error)
    return 0


def cmd_gradcheck(args):
    failed = []
    for seed in range(args.seed, args.seed + args.instances):
        rep = analysis.gradcheck(args.op, seed, args.step, args.tol)
        print(f"{'PASS' if rep.passed else 'FAIL'} op={rep.op} seed={seed} max_rel_err={rep.max_rel_error:.3e} "
              f"worst={rep.worst[0]}[{rep.worst[1]}]")
        if not rep.passed:
            failed.append(rep)
    if failed:
        rep = failed[0]
        raise CommandFailed("gradient mismatch", op=rep.op, seed=rep.seed, max_rel_error=rep.max_rel_error,
                            worst=list(rep.worst), nonfinite=rep.nonfinite[:10] or None)
    return 0


def _print_csv(header, rows):
    print(",".join(header))
    for row in rows:
        print(",".join(str(v) for v in row))


def cmd_flops(args):
    if args.curve:
        lo, hi = args.curve
        if lo < 2 or hi < lo:
            raise CommandFailed("curve bounds must satisfy 2 <= Lmin <= Lmax")
        lengths, L = [], lo
        while L <= hi:
            lengths.append(L)
            L *= 2
        report = analysis.scaling_curve(lengths, C=args.width, N=args.state_size)
        header, rows = report.curve_csv_rows()
        print(f"# log-log slope: conm={report.slopes['conm']:.4f} consa={report.slopes['consa']:.4f}",
              file=sys.stderr)
    else:
        report = analysis.table_d1(N=args.state_size)
        header, rows = report.stage_csv_rows()
        for stage in report.stages:
            dev_m = stage["conm_deviation"]
            dev_s = stage["consa_deviation"]
            print(f"# stage {stage['stage']}: conm {stage['conm_gflops']:.3f} G"
                  + (f" ({dev_m:+.1%} vs {stage['conm_reference']})" if dev_m is not None else "")
                  + f", consa {stage['consa_gflops']:.3f} G"
                  + (f" ({dev_s:+.1%} vs {stage['consa_reference']})" if dev_s is not None else "")
                  + f", naive 4L^2C {stage['consa_naive_gflops']:.3f} G", file=sys.stderr)
            for kind in ("conm", "consa"):
                terms = report.breakdown[f"stage{stage['stage']}"][kind]
                print(f"#   {kind}: " + ", ".join(f"{k}={v:.4f}" for k, v in terms.items()), file=sys.stderr)
    if args.out:
        io.write_csv(args.out, header, rows)
    else:
        _print_csv(header, rows)
    if args.json:
        io.write_json(args.json, report.to_dict())
    return 0


def cmd_forward(args):
    cfg = io.resolve_config(args.config)
    weights, cfg = io.load_weights(args.weights, cfg)
    rgb, x = io.read_ppm(args.rgb), io.read_ppm(args.x)
    logits = forward(rgb, x, weights, cfg, method=args.method)
    if not np.isfinite(logits).all():
        raise CommandFailed("non-finite logits", index=int(np.argmax(~np.isfinite(logits).reshape(-1))))
    seg = labels_from_logits(logits, cfg.num_classes)
    io.write_label_ppm(seg, io.palette(cfg.num_classes), args.out)
    if args.save_logits:
        io.write_tensor(args.save_logits, logits)
    print(f"wrote {args.out} ({seg.labels.shape[0]}x{seg.labels.shape[1]}, {cfg.num_classes} classes)")
    return 0


def cmd_shapes(args):
    cfg = io.resolve_config(args.config)
    H, W = args.hw
    print(f"config {cfg.config_hash()[:12]} input {H}x{W}")
    for k, (h, w, c) in enumerate(cfg.pyramid_shapes(H, W), start=1):
        print(f"stage {k}: {h}x{w}x{c}")
    print(f"params: {count_params(cfg) / 1e6:.2f} M")
    cost = model_flops(cfg, H, W)
    print(f"flops: {cost.total / 1e9:.2f} G")
    for name, value in cost.grouped(1).items():
        print(f"  {name}: {value / 1e9:.2f} G")
    return 0


def cmd_bench(args):
    rows = analysis.bench_scan(args.lengths, D=args.dim, N=args.state_size, repeats=args.repeats,
                               threads=args.threads, seed=args.seed)
    print("L,sequential_s,chunked_s,attention_s")
    for r in rows:
        print(f"{r['L']},{r['sequential']:.6f},{r['chunked']:.6f},{r['attention']:.6f}")
    problems = []
    for key in ("sequential", "chunked"):
        for L, ratio in analysis.doubling_ratios(rows, key):
            if L >= SCAN_DOUBLING_FROM and ratio > SCAN_DOUBLING_MAX:
                problems.append(f"{key} time ratio {ratio:.2f} at L={L} exceeds {SCAN_DOUBLING_MAX}")
    for L, ratio in analysis.doubling_ratios(rows, "attention"):
        if L >= ATTENTION_DOUBLING_FROM and ratio < ATTENTION_DOUBLING_MIN:
            problems.append(f"attention time ratio {ratio:.2f} at L={L} below {ATTENTION_DOUBLING_MIN}")
    if args.out:
        io.write_csv(args.out, ["L", "sequential", "chunked", "attention"],
                     [[r["L"], r["sequential"], r["chunked"], r["attention"]] for r in rows])
    if problems:
        raise CommandFailed("timing thresholds violated", problems=problems)
    return 0


def cmd_init_weights(args):
    cfg = io.resolve_config(args.config)
    weights = init_weights(cfg, args.seed)
    io.save_weights(args.out, weights, cfg)
    print(f"wrote {args.out} ({count_params(cfg)} parameters, config {cfg.config_hash()[:12]})")
    return 0


# --------------------------------------------------------------------------
# parser


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="sigmaseg", description="RGB-X selective-scan segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan-check", help="compare scan kernels against slow oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=_positive_int, default=200)
    p.add_argument("--max-len", type=_positive_int, default=64)
    p.add_argument("--tol", type=float, default=checks.DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_scan_check)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--op", choices=analysis.GRADCHECK_OPS, default="selective_scan")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=_positive_int, default=1)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="fusion block cost table or scaling curve")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--table", action="store_true", help="per-stage table (default)")
    mode.add_argument("--curve", nargs=2, type=_positive_int, metavar=("LMIN", "LMAX"),
                      help="cost versus concatenated length, doubling from LMIN to LMAX")
    p.add_argument("--width", type=_positive_int, default=96, help="channel width for --curve")
    p.add_argument("--state-size", type=_positive_int, default=4)
    p.add_argument("--out", help="CSV output path (stdout if omitted)")
    p.add_argument("--json", help="also write the full report with term breakdown as JSON")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("forward", help="segment an RGB/X image pair")
    p.add_argument("--config", required=True, help="config JSON path or preset name")
    p.add_argument("--weights", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-logits", help="write stride-4 logits as a TensorFile")
    p.add_argument("--method", choices=("taylor", "zoh"), default="taylor")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("shapes", help="pyramid, parameter and FLOP audit")
    p.add_argument("--config", required=True, help="config JSON path or preset name")
    p.add_argument("--hw", nargs=2, type=_positive_int, required=True, metavar=("H", "W"))
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("bench", help="time sequential/chunked scans against attention")
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--repeats", type=_positive_int, default=3)
    p.add_argument("--lengths", nargs="+", type=_positive_int, default=[1024, 2048, 4096, 8192])
    p.add_argument("--dim", type=_positive_int, default=16)
    p.add_argument("--state-size", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("init-weights", help="write a seeded random weight bundle")
    p.add_argument("--config", required=True, help="config JSON path or preset name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandFailed as exc:
        return _fail_json("check_failed", str(exc), **exc.details)
    except SigmaError as exc:
        return _fail_json(type(exc).__name__, str(exc), offset=getattr(exc, "offset", None),
                          index=getattr(exc, "index", None))
    except OSError as exc:
        return _fail_json("io_error", str(exc), path=exc.filename)


if __name__ == "__main__":
    sys.exit(main())
