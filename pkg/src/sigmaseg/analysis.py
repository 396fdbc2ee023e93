"""Verification and complexity tooling: gradient checks, FLOP tables, scaling curves, timings."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .flops import conm_cost, consa_cost
from .oracles import random_scan_inputs
from .ssm import (DiscreteScanInputs, discretize_taylor, discretize_zoh, selective_scan_backward,
                  selective_scan_chunked, selective_scan_seq)

STAGE_GEOMETRY = ((1, 120, 160, 96), (2, 60, 80, 192), (3, 30, 40, 384), (4, 15, 20, 768))
# published (ConMB, ConSA) GFLOPs per stage; ConSA at stage 1 was not reported
REFERENCE_GFLOPS = {1: (1.82, None), 2: (1.71, 77.89), 3: (1.65, 15.94), 4: (1.62, 8.19)}
CURVE_LENGTHS = tuple(2 ** p for p in range(10, 17))


# --------------------------------------------------------------------------
# FLOP counting


def _check_dims(*dims):
    if any(int(d) != d or d <= 0 for d in dims):
        raise ConfigError(f"dimensions must be positive integers, got {dims}")


def flops_conm(H, W, C, N=4):
    """ConMB cost in GFLOPs for two H x W x C maps (sequence length 2HW)."""
    _check_dims(H, W, C, N)
    return conm_cost(H, W, C, N).total / 1e9


def flops_consa(H, W, C):
    """Attention-based ConSA cost in GFLOPs for two H x W x C maps."""
    _check_dims(H, W, C)
    return consa_cost(H, W, C).total / 1e9


def consa_quadratic_gflops(L, C, expand=2):
    """The L^2 part of ConSA alone (scores, softmax, weighted values)."""
    E = expand * C
    return (2 * L * L * E + 3 * L * L) / 1e9


def naive_attention_gflops(L, C):
    """The common back-of-envelope ``4 L^2 C`` estimate."""
    return 4 * L * L * C / 1e9


@dataclass
class FlopsReport:
    stages: list = field(default_factory=list)
    curve: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    breakdown: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def stage_csv_rows(self):
        header = ["stage", "H", "W", "C", "conm_gflops", "consa_gflops"]
        rows = [[r["stage"], r["H"], r["W"], r["C"], f"{r['conm_gflops']:.4f}", f"{r['consa_gflops']:.4f}"]
                for r in self.stages]
        return header, rows

    def curve_csv_rows(self):
        header = ["L", "conm", "consa"]
        return header, [[r["L"], f"{r['conm']:.6g}", f"{r['consa']:.6g}"] for r in self.curve]


def _deviation(value, ref):
    return None if ref is None else value / ref - 1.0


def table_d1(N=4):
    """Per-stage ConMB/ConSA cost with itemised terms and deviation from the reference cells."""
    report = FlopsReport()
    for stage, H, W, C in STAGE_GEOMETRY:
        conm, consa = conm_cost(H, W, C, N), consa_cost(H, W, C)
        ref_m, ref_s = REFERENCE_GFLOPS[stage]
        L = 2 * H * W
        report.stages.append({
            "stage": stage, "H": H, "W": W, "C": C,
            "conm_gflops": conm.total / 1e9, "consa_gflops": consa.total / 1e9,
            "conm_reference": ref_m, "consa_reference": ref_s,
            "conm_deviation": _deviation(conm.total / 1e9, ref_m),
            "consa_deviation": _deviation(consa.total / 1e9, ref_s),
            "consa_naive_gflops": naive_attention_gflops(L, C),
        })
        report.breakdown[f"stage{stage}"] = {
            "conm": {k: v / 1e9 for k, v in conm.terms.items()},
            "consa": {k: v / 1e9 for k, v in consa.terms.items()},
        }
    return report


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)[0])


def scaling_curve(lengths=CURVE_LENGTHS, C=96, N=4, report=None):
    """ConMB vs ConSA cost as the concatenated length L grows at fixed width C."""
    report = report or FlopsReport()
    for L in lengths:
        if L % 2:
            raise ConfigError(f"concatenated length must be even, got {L}")
        M = L // 2
        report.curve.append({
            "L": int(L),
            "conm": conm_cost(M, 1, C, N).total / 1e9,
            "consa": consa_cost(M, 1, C).total / 1e9,
            "consa_quadratic": consa_quadratic_gflops(L, C),
        })
    xs = [r["L"] for r in report.curve]
    report.slopes = {
        "conm": loglog_slope(xs, [r["conm"] for r in report.curve]),
        "consa": loglog_slope(xs, [r["consa"] for r in report.curve]),
    }
    return report


# --------------------------------------------------------------------------
# discretisation


def discretization_errors(deltas, A=-1.0, B=1.0):
    """Max |B_bar(zoh) - B_bar(taylor)| for each step size, with empirical orders between neighbours."""
    A_arr = np.full((1, 1), A, dtype=np.float64)
    B_arr = np.full((1, 1), B, dtype=np.float64)
    errors = []
    for dt in deltas:
        delta = np.full((1, 1), dt, dtype=np.float64)
        _, zoh = discretize_zoh(A_arr, B_arr, delta)
        errors.append(float(np.max(np.abs(zoh - discretize_taylor(B_arr, delta)))))
    orders = [float(np.log(e0 / e1) / np.log(d0 / d1))
              for (e0, e1, d0, d1) in zip(errors, errors[1:], deltas, deltas[1:])]
    return errors, orders


# --------------------------------------------------------------------------
# gradient checking

GRADCHECK_OPS = ("linear", "selective_scan", "selective_scan_corrupted")


@dataclass
class GradcheckReport:
    op: str
    seed: int
    max_rel_error: float
    worst: tuple  # (input name, flat index)
    tolerance: float
    passed: bool
    nonfinite: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _entry_error(analytic, numeric, floor):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _finite_difference(fn, inputs, name, step):
    arr = inputs[name]
    out = np.empty(arr.size)
    flat = arr.reshape(-1)
    for i in range(arr.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(inputs)
        flat[i] = orig - step
        down = fn(inputs)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(arr.shape)


def _linear_problem(rng):
    n, d_in, d_out = (int(v) for v in rng.integers(1, 9, size=3))
    inputs = {"x": rng.normal(size=(n, d_in)), "W": rng.normal(size=(d_in, d_out))}
    g = rng.normal(size=(n, d_out))

    def loss(v):
        return float(np.sum(g * (v["x"] @ v["W"])))

    def analytic(v):
        return {"x": g @ v["W"].T, "W": v["x"].T @ g}

    return inputs, loss, analytic


def _scan_problem(rng, corrupt=False, max_len=16, max_dim=4, max_state=4):
    L = int(rng.integers(1, max_len + 1))
    D = int(rng.integers(1, max_dim + 1))
    N = int(rng.integers(1, max_state + 1))
    inp = random_scan_inputs(rng, L, D, N)
    inputs = {"x": inp.x, "A_bar": inp.A_bar, "B_bar": inp.B_bar, "C": inp.C, "D_skip": inp.D_skip}
    g = rng.normal(size=(L, D))
    chunk = int(rng.integers(1, L + 1))

    def build(v):
        return DiscreteScanInputs(v["A_bar"], v["B_bar"], v["C"], v["D_skip"], v["x"])

    def loss(v):
        return float(np.sum(g * selective_scan_seq(build(v))))

    def analytic(v):
        grads = selective_scan_backward(build(v), g, chunk=chunk).as_dict()
        if corrupt:
            grads["A_bar"] = -grads["A_bar"]
        return grads

    return inputs, loss, analytic


def gradcheck(op_id="selective_scan", seed=0, step=1e-5, tolerance=1e-4, floor=1e-6):
    """Compare analytic gradients of ``dot(g, op(inputs))`` against central differences (f64).

    The per-entry error is ``|a - n| / max(|a|, |n|, floor)``; the report
    carries the worst entry. Non-finite analytic gradients fail the check.
    """
    rng = np.random.default_rng(seed)
    if op_id == "linear":
        inputs, loss, analytic = _linear_problem(rng)
    elif op_id == "selective_scan":
        inputs, loss, analytic = _scan_problem(rng)
    elif op_id == "selective_scan_corrupted":
        inputs, loss, analytic = _scan_problem(rng, corrupt=True)
    else:
        raise ConfigError(f"unknown gradcheck op {op_id!r}; expected one of {GRADCHECK_OPS}")

    grads = analytic(inputs)
    nonfinite = [(name, int(i)) for name, gr in grads.items() for i in np.flatnonzero(~np.isfinite(gr))]
    if nonfinite:
        return GradcheckReport(op_id, seed, float("inf"), nonfinite[0], tolerance, False, nonfinite)

    worst, worst_at = 0.0, ("", -1)
    for name in inputs:
        numeric = _finite_difference(loss, inputs, name, step)
        err = _entry_error(np.asarray(grads[name], dtype=np.float64), numeric, floor)
        if err.size and err.max() > worst:
            worst, worst_at = float(err.max()), (name, int(err.argmax()))
    return GradcheckReport(op_id, seed, worst, worst_at, tolerance, worst <= tolerance)


# --------------------------------------------------------------------------
# timing


def attention_blockwise(Q, K, V, block=512):
    """Exact softmax attention computed one query block at a time (O(L^2) work, O(L*block) memory)."""
    scale = 1.0 / np.sqrt(Q.shape[1])
    out = np.empty((Q.shape[0], V.shape[1]), dtype=np.result_type(Q, V))
    for s in range(0, Q.shape[0], block):
        scores = (Q[s:s + block] @ K.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[s:s + block] = scores @ V
    return out


def _median_time(fn, repeats):
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_scan(L_list=(1024, 2048, 4096, 8192), D=16, N=4, repeats=3, threads=1, seed=0, attention=True):
    """Median wall time per length for the sequential scan, chunked scan and naive attention.

    Returns a list of rows ``{L, sequential, chunked, attention}`` in seconds.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=threads):
        warm = random_scan_inputs(rng, 64, D, N)
        selective_scan_seq(warm)
        selective_scan_chunked(warm, "auto")
        for L in L_list:
            inp = random_scan_inputs(rng, int(L), D, N)
            row = {
                "L": int(L),
                "sequential": _median_time(lambda: selective_scan_seq(inp), repeats),
                "chunked": _median_time(lambda: selective_scan_chunked(inp, "auto"), repeats),
            }
            if attention:
                Q, K, V = (rng.normal(size=(int(L), D)) for _ in range(3))
                row["attention"] = _median_time(lambda: attention_blockwise(Q, K, V), repeats)
            rows.append(row)
    return rows


def doubling_ratios(rows, key):
    """time(2L)/time(L) for consecutive rows whose lengths double."""
    out = []
    for a, b in zip(rows, rows[1:]):
        if b["L"] == 2 * a["L"] and key in a:
            out.append((a["L"], b[key] / a[key]))
    return out
