"""Selective state space scans.

A diagonal continuous system ``h' = A h + B x``, ``y = C h + D x`` is
discretised per token with step ``delta`` and evaluated as the recurrence

    h_k = A_bar_k * h_{k-1} + B_bar_k * x_k
    y_k = sum_n C_k[n] * h_k[:, n] + D * x_k

``B``, ``C`` and ``delta`` are functions of the input (the selection
mechanism). Shapes follow the convention ``x: (L, D)``, ``A: (D, N)``,
``B, C: (L, N)``, ``delta: (L, D)``, ``A_bar, B_bar: (L, D, N)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, NumericError, StabilityError
from .tensor import WeightInit, softplus

DT_MIN = 1e-3
DT_MAX = 0.1
DT_FLOOR = 1e-4
DISCRETIZATIONS = ("taylor", "zoh")


def default_dt_rank(model_dim):
    return math.ceil(model_dim / 16)


@dataclass
class SelectiveSsmParams:
    """Parameters of one selective scan over ``D`` channels and ``N`` states.

    ``A = -exp(A_log)`` is the diagonal state matrix. ``B`` and ``C`` come
    from ``x @ W_B`` / ``x @ W_C``; the step is the low-rank map
    ``softplus(x @ W_dt @ W_dt_up + dt_bias)``.
    """

    A_log: np.ndarray
    D_skip: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray
    W_dt: np.ndarray
    W_dt_up: np.ndarray
    dt_bias: np.ndarray

    @property
    def A(self):
        return -np.exp(self.A_log)

    @property
    def channels(self):
        return self.A_log.shape[0]

    @property
    def state_size(self):
        return self.A_log.shape[1]

    @property
    def dt_rank(self):
        return self.W_dt.shape[1]

    def validate(self):
        D, N = self.A_log.shape
        R = self.W_dt.shape[1] if self.W_dt.ndim == 2 else 0
        expected = {
            "D_skip": (D,), "W_B": (D, N), "W_C": (D, N),
            "W_dt": (D, R), "W_dt_up": (R, D), "dt_bias": (D,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"SelectiveSsmParams.{name}: expected {shape}, got {got}")
        if R < 1:
            raise DimensionError("SelectiveSsmParams: dt rank must be >= 1")
        return self


def init_ssm_params(init: WeightInit, channels, state_size, dt_rank=None, model_dim=None):
    """S4D-real ``A`` (-1..-N per state), unit skip, step bias in [DT_MIN, DT_MAX]."""
    if dt_rank is None:
        dt_rank = default_dt_rank(model_dim if model_dim is not None else channels)
    D, N, R = channels, state_size, dt_rank

    def a_log():
        return np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1)))

    def dt_bias():
        u = init.rng.uniform(size=D)
        dt = np.exp(u * (math.log(DT_MAX) - math.log(DT_MIN)) + math.log(DT_MIN))
        dt = np.maximum(dt, DT_FLOOR)
        return dt + np.log(-np.expm1(-dt))  # inverse softplus

    std = R ** -0.5
    return SelectiveSsmParams(
        A_log=init.values(a_log, (D, N)),
        D_skip=init.ones((D,)),
        W_B=init.trunc_normal((D, N)),
        W_C=init.trunc_normal((D, N)),
        W_dt=init.trunc_normal((D, R)),
        W_dt_up=init.uniform((R, D), -std, std),
        dt_bias=init.values(dt_bias, (D,)),
    )


@dataclass
class DiscreteScanInputs:
    A_bar: np.ndarray  # (L, D, N)
    B_bar: np.ndarray  # (L, D, N)
    C: np.ndarray  # (L, N)
    D_skip: np.ndarray  # (D,)
    x: np.ndarray  # (L, D)

    @property
    def shape(self):
        return self.A_bar.shape

    def validate(self):
        if self.x.ndim != 2:
            raise DimensionError(f"scan input x must be (L, D), got {self.x.shape}")
        L, D = self.x.shape
        if self.A_bar.ndim != 3 or self.A_bar.shape[:2] != (L, D):
            raise DimensionError(f"A_bar {self.A_bar.shape} does not match x {self.x.shape}")
        N = self.A_bar.shape[2]
        if self.B_bar.shape != (L, D, N):
            raise DimensionError(f"B_bar {self.B_bar.shape} does not match A_bar {self.A_bar.shape}")
        if self.C.shape != (L, N):
            raise DimensionError(f"C {self.C.shape} is not ({L}, {N})")
        if self.D_skip.shape != (D,):
            raise DimensionError(f"D_skip {self.D_skip.shape} is not ({D},)")
        return self


@dataclass
class ScanGradients:
    x: np.ndarray
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray
    D_skip: np.ndarray

    def as_dict(self):
        return {"x": self.x, "A_bar": self.A_bar, "B_bar": self.B_bar, "C": self.C, "D_skip": self.D_skip}


def _check_finite(arr, what):
    arr = np.asarray(arr)
    if np.isfinite(arr).all():
        return
    rows = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1) if arr.ndim > 1 else ~np.isfinite(arr)
    first = int(np.argmax(rows))
    raise NumericError(f"{what}: non-finite value at index {first}", index=first)


def derive_selection(x, params: SelectiveSsmParams):
    """Input-dependent ``B``, ``C`` (L, N) and step ``delta`` (L, D)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise DimensionError(f"derive_selection: x {x.shape} does not have {params.channels} channels")
    _check_finite(x, "derive_selection input")
    B = x @ params.W_B
    C = x @ params.W_C
    delta = softplus((x @ params.W_dt) @ params.W_dt_up + params.dt_bias)
    return B, C, delta


def _check_discretization_inputs(A, delta):
    if np.any(A >= 0):
        raise StabilityError("state matrix entries must be strictly negative")
    if np.any(delta <= 0):
        raise DomainError("step delta must be strictly positive")


def discretize_zoh(A, B, delta):
    """Zero-order hold: ``A_bar = exp(delta*A)``, ``B_bar = (exp(delta*A) - 1)/A * B``."""
    A, B, delta = np.asarray(A), np.asarray(B), np.asarray(delta)
    _check_discretization_inputs(A, delta)
    if delta.shape[1] != A.shape[0] or B.shape[0] != delta.shape[0] or B.shape[1] != A.shape[1]:
        raise DimensionError(f"discretize_zoh: A {A.shape}, B {B.shape}, delta {delta.shape} disagree")
    dA = delta[:, :, None] * A[None]
    A_bar = np.exp(dA)
    B_bar = np.expm1(dA) / A[None] * B[:, None, :]
    return A_bar, B_bar


def discretize_taylor(B, delta):
    """First-order form ``B_bar = delta * B``."""
    B, delta = np.asarray(B), np.asarray(delta)
    if np.any(delta <= 0):
        raise DomainError("step delta must be strictly positive")
    if B.shape[0] != delta.shape[0]:
        raise DimensionError(f"discretize_taylor: B {B.shape} and delta {delta.shape} disagree on L")
    return delta[:, :, None] * B[:, None, :]


def prepare_scan(x, A, D_skip, B, C, delta, method="taylor"):
    """Discretise one selective scan; ``A_bar`` is always ``exp(delta*A)``."""
    if method == "taylor":
        _check_discretization_inputs(A, delta)
        A_bar = np.exp(delta[:, :, None] * A[None])
        B_bar = discretize_taylor(B, delta)
    elif method == "zoh":
        A_bar, B_bar = discretize_zoh(A, B, delta)
    else:
        raise DomainError(f"unknown discretization {method!r}; expected one of {DISCRETIZATIONS}")
    return DiscreteScanInputs(A_bar, B_bar, np.asarray(C), np.asarray(D_skip), np.asarray(x)).validate()


def _lane_sum(H, C):
    # fixed n order so every row reduces identically regardless of position
    y = H[:, :, 0] * C[:, None, 0]
    for n in range(1, H.shape[2]):
        y = y + H[:, :, n] * C[:, None, n]
    return y


def _readout(inp, H):
    y = _lane_sum(H, inp.C) + inp.D_skip * inp.x
    _check_finite(y, "selective scan")
    return y


def selective_scan_seq(inp: DiscreteScanInputs, return_states=False):
    """Left-to-right recurrence from ``h_0 = 0``; returns y (L, D)."""
    inp.validate()
    a = inp.A_bar
    bx = inp.B_bar * inp.x[:, :, None]
    H = np.empty_like(bx)
    h = np.zeros(bx.shape[1:], dtype=bx.dtype)
    for k in range(a.shape[0]):
        h = a[k] * h + bx[k]
        H[k] = h
    y = _readout(inp, H)
    return (y, H) if return_states else y


def auto_chunk(L):
    return max(1, math.isqrt(max(L - 1, 0)) + 1)


def selective_scan_chunked(inp: DiscreteScanInputs, chunk, return_states=False):
    """Same contract as :func:`selective_scan_seq`, evaluated in chunks.

    Each chunk is scanned from a zero state while accumulating the running
    product of ``A_bar`` (all chunks at once, ordered within a chunk). The
    chunk-entry states are then propagated with the composition
    ``(a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2)`` and added back.
    """
    inp.validate()
    if chunk == "auto":
        chunk = auto_chunk(inp.x.shape[0])
    if not isinstance(chunk, (int, np.integer)) or chunk < 1:
        raise DomainError(f"chunk must be a positive integer, got {chunk!r}")
    L, D, N = inp.A_bar.shape
    chunk = min(int(chunk), max(L, 1))
    nc = -(-L // chunk)
    pad = nc * chunk - L
    a = inp.A_bar
    b = inp.B_bar * inp.x[:, :, None]
    if pad:
        a = np.concatenate([a, np.ones((pad, D, N), dtype=a.dtype)])
        b = np.concatenate([b, np.zeros((pad, D, N), dtype=b.dtype)])
    a = a.reshape(nc, chunk, D, N)
    b = b.reshape(nc, chunk, D, N)

    local = np.empty_like(b)
    prod = np.empty_like(a)
    local[:, 0] = b[:, 0]
    prod[:, 0] = a[:, 0]
    for t in range(1, chunk):
        local[:, t] = a[:, t] * local[:, t - 1] + b[:, t]
        prod[:, t] = a[:, t] * prod[:, t - 1]

    H = local
    if nc > 1:
        carry_in = np.zeros((nc, D, N), dtype=b.dtype)
        for c in range(1, nc):
            carry_in[c] = local[c - 1, -1] + prod[c - 1, -1] * carry_in[c - 1]
        H = local.copy()
        H[1:] = local[1:] + prod[1:] * carry_in[1:, None]
    H = H.reshape(nc * chunk, D, N)[:L]
    y = _readout(inp, H)
    return (y, H) if return_states else y


def selective_scan_backward(inp: DiscreteScanInputs, grad_y, chunk=16):
    """Reverse-mode adjoint of the scan for ``(x, A_bar, B_bar, C, D_skip)``.

    Only chunk-entry states are kept from the forward sweep; states inside a
    chunk are recomputed while walking it backwards, bounding the extra memory
    to ``O(D * N * chunk)``.
    """
    inp.validate()
    grad_y = np.asarray(grad_y)
    if grad_y.shape != inp.x.shape:
        raise DimensionError(f"grad_y {grad_y.shape} does not match scan output {inp.x.shape}")
    if chunk < 1:
        raise DomainError("chunk must be >= 1")
    a, Bb, C, x = inp.A_bar, inp.B_bar, inp.C, inp.x
    L, D, N = a.shape
    bx = Bb * x[:, :, None]
    dtype = np.result_type(bx, grad_y)

    starts = []
    h = np.zeros((D, N), dtype=dtype)
    for s in range(0, L, chunk):
        starts.append(h)
        for k in range(s, min(s + chunk, L)):
            h = a[k] * h + bx[k]

    gx = np.empty((L, D), dtype=dtype)
    gA = np.empty((L, D, N), dtype=dtype)
    gB = np.empty((L, D, N), dtype=dtype)
    gC = np.empty((L, N), dtype=dtype)
    g_next = np.zeros((D, N), dtype=dtype)
    for ci in range(len(starts) - 1, -1, -1):
        s = ci * chunk
        e = min(s + chunk, L)
        states = [starts[ci]]
        for k in range(s, e):
            states.append(a[k] * states[-1] + bx[k])
        for k in range(e - 1, s - 1, -1):
            h_k, h_prev = states[k - s + 1], states[k - s]
            gy = grad_y[k]
            g = gy[:, None] * C[k][None, :] + g_next
            gC[k] = (gy[:, None] * h_k).sum(axis=0)
            gA[k] = g * h_prev
            gB[k] = g * x[k][:, None]
            gx[k] = (g * Bb[k]).sum(axis=1) + inp.D_skip * gy
            g_next = a[k] * g
    gD = (grad_y * x).sum(axis=0)
    return ScanGradients(gx, gA, gB, gC, gD)


def run_scan(inp, chunk=None):
    if chunk is None:
        return selective_scan_seq(inp)
    return selective_scan_chunked(inp, chunk)


def selective_scan(x, params: SelectiveSsmParams, method="taylor", chunk=None):
    """Full selective scan of a (L, D) sequence: select, discretise, scan."""
    B, C, delta = derive_selection(x, params)
    inp = prepare_scan(x, params.A, params.D_skip, B, C, delta, method)
    return run_scan(inp, chunk)
