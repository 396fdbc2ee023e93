"""Oracle-equivalence suite shared by the ``scan-check`` command and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracles
from .fusion import concat_selective_scan, cross_selective_scan
from .scan2d import DirectionalParams, ss2d
from .ssm import SelectiveSsmParams, selective_scan, selective_scan_chunked, selective_scan_seq

DEFAULT_TOLERANCE = 1e-10


@dataclass
class CheckResult:
    name: str
    case: int
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error <= self.tolerance


def random_params(rng, D, N, R=None, scale=0.5):
    """f64 scan parameters with larger projections than the training init, for coverage."""
    R = R or max(1, D // 2)
    return SelectiveSsmParams(
        A_log=np.log(rng.uniform(0.5, float(N) + 0.5, size=(D, N))),
        D_skip=rng.normal(size=D),
        W_B=rng.normal(0, scale, size=(D, N)),
        W_C=rng.normal(0, scale, size=(D, N)),
        W_dt=rng.normal(0, scale, size=(D, R)),
        W_dt_up=rng.normal(0, scale, size=(R, D)),
        dt_bias=rng.uniform(-3.0, 0.0, size=D),
    )


def check_scan(rng, case, max_len=64, max_dim=8, max_state=8, tol=DEFAULT_TOLERANCE):
    L = int(rng.integers(1, max_len + 1))
    D = int(rng.integers(1, max_dim + 1))
    N = int(rng.integers(1, max_state + 1))
    inp = oracles.random_scan_inputs(rng, L, D, N)
    want = oracles.naive_scan_inputs(inp)
    chunk = int(rng.integers(1, L + 1))
    return [
        CheckResult("scan.sequential", case, oracles.max_relative_error(selective_scan_seq(inp), want), tol),
        CheckResult("scan.chunked", case, oracles.max_relative_error(selective_scan_chunked(inp, chunk), want), tol),
    ]


def check_selective(rng, case, max_len=16, tol=DEFAULT_TOLERANCE):
    L, D, N = (int(v) for v in rng.integers(1, [max_len + 1, 7, 7]))
    params = random_params(rng, D, N)
    x = rng.normal(size=(L, D))
    method = ("taylor", "zoh")[case % 2]
    got = selective_scan(x, params, method=method, chunk=int(rng.integers(1, L + 1)))
    want = oracles.naive_selective_scan(x, params, method)
    return [CheckResult(f"selective.{method}", case, oracles.max_relative_error(got, want), tol)]


def check_ss2d(rng, case, tol=DEFAULT_TOLERANCE):
    H, W, D, N = (int(v) for v in rng.integers(1, [6, 6, 4, 4]))
    params = DirectionalParams([random_params(rng, D, N) for _ in range(4)])
    F = rng.normal(size=(H, W, D))
    return [CheckResult("ss2d", case, oracles.max_relative_error(ss2d(F, params, chunk=2), oracles.naive_ss2d(F, params)), tol)]


def check_fusion(rng, case, tol=DEFAULT_TOLERANCE):
    L, D, N = (int(v) for v in rng.integers(1, [12, 5, 5]))
    a, b = rng.normal(size=(L, D)), rng.normal(size=(L, D))
    p, q = random_params(rng, D, N), random_params(rng, D, N)
    out = []
    got = concat_selective_scan(a, b, p, chunk=3)
    want = oracles.naive_concat_scan(a, b, p)
    out.append(CheckResult("fusion.concat", case,
                           max(oracles.max_relative_error(g, w) for g, w in zip(got, want)), tol))
    modes = {"C": ("C",), "B": ("B",), "D": ("D",), "B_and_C": ("B", "C"), "C_and_D": ("C", "D")}
    mode = list(modes)[case % len(modes)]
    got = cross_selective_scan(a, b, p, q, mode)
    want = oracles.naive_cross_scan(a, b, p, q, modes[mode])
    out.append(CheckResult(f"fusion.cross.{mode}", case,
                           max(oracles.max_relative_error(g, w) for g, w in zip(got, want)), tol))
    return out


def scan_check(seed=0, cases=200, max_len=64, tol=DEFAULT_TOLERANCE):
    """Run every oracle comparison; scan cases use the full budget, composite ones a tenth of it."""
    rng = np.random.default_rng(seed)
    results = []
    for case in range(cases):
        results += check_scan(rng, case, max_len=max_len, tol=tol)
    for case in range(max(1, cases // 10)):
        results += check_selective(rng, case, tol=tol)
        results += check_ss2d(rng, case, tol=tol)
        results += check_fusion(rng, case, tol=tol)
    return results


def summarize(results):
    """``{name: (cases, max error, all passed)}``."""
    out = {}
    for r in results:
        n, err, ok = out.get(r.name, (0, 0.0, True))
        out[r.name] = (n + 1, max(err, r.error), ok and r.passed)
    return out
