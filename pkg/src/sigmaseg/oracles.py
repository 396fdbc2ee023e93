"""Slow, obviously-correct reference implementations used for verification.

Everything here is written with plain Python loops over floats so that it
shares no vectorised code path with the production kernels.
"""

from __future__ import annotations

import math

import numpy as np

from .ssm import DiscreteScanInputs


def naive_scan(A_bar, B_bar, C, D_skip, x):
    """Element-by-element recurrence; returns y as a nested list (L, D)."""
    L, D, N = len(A_bar), len(A_bar[0]), len(A_bar[0][0])
    h = [[0.0] * N for _ in range(D)]
    out = []
    for k in range(L):
        row = []
        for d in range(D):
            acc = 0.0
            for n in range(N):
                h[d][n] = float(A_bar[k][d][n]) * h[d][n] + float(B_bar[k][d][n]) * float(x[k][d])
                acc += float(C[k][n]) * h[d][n]
            row.append(acc + float(D_skip[d]) * float(x[k][d]))
        out.append(row)
    return out


def naive_scan_inputs(inp: DiscreteScanInputs):
    return np.array(naive_scan(inp.A_bar.tolist(), inp.B_bar.tolist(), inp.C.tolist(),
                               inp.D_skip.tolist(), inp.x.tolist()), dtype=np.float64).reshape(inp.x.shape)


def naive_matmul(a, b):
    a, b = np.asarray(a, dtype=np.float64).tolist(), np.asarray(b, dtype=np.float64).tolist()
    return np.array([[math.fsum(a[i][k] * b[k][j] for k in range(len(b)))
                      for j in range(len(b[0]))] for i in range(len(a))])


def naive_softplus(v):
    return np.vectorize(lambda t: math.log1p(math.exp(-abs(t))) + max(t, 0.0))(np.asarray(v, dtype=np.float64))


def naive_selection(x, params):
    """B, C, delta via loop matmuls and scalar softplus."""
    B = naive_matmul(x, params.W_B)
    C = naive_matmul(x, params.W_C)
    pre = naive_matmul(naive_matmul(x, params.W_dt), params.W_dt_up) + np.asarray(params.dt_bias, dtype=np.float64)
    return B, C, naive_softplus(pre)


def naive_attention(Q, K, V):
    """softmax(Q K^T / sqrt(d)) V one query row at a time."""
    Q, K, V = (np.asarray(t, dtype=np.float64) for t in (Q, K, V))
    d = Q.shape[1]
    out = np.empty((Q.shape[0], V.shape[1]))
    for i in range(Q.shape[0]):
        s = [float(np.dot(Q[i], K[j])) / math.sqrt(d) for j in range(K.shape[0])]
        m = max(s)
        w = [math.exp(t - m) for t in s]
        z = math.fsum(w)
        out[i] = sum(wj / z * V[j] for j, wj in enumerate(w))
    return out


def random_scan_inputs(rng, L, D, N, dtype=np.float64, a_range=(0.2, 0.99)):
    """A random, stable set of discretised scan inputs."""
    return DiscreteScanInputs(
        A_bar=rng.uniform(*a_range, size=(L, D, N)).astype(dtype),
        B_bar=rng.normal(0, 0.5, size=(L, D, N)).astype(dtype),
        C=rng.normal(size=(L, N)).astype(dtype),
        D_skip=rng.normal(size=(D,)).astype(dtype),
        x=rng.normal(size=(L, D)).astype(dtype),
    )


def max_relative_error(actual, expected, floor=1e-12):
    actual, expected = np.asarray(actual, dtype=np.float64), np.asarray(expected, dtype=np.float64)
    scale = max(float(np.max(np.abs(expected), initial=0.0)), floor)
    return float(np.max(np.abs(actual - expected), initial=0.0)) / scale


def naive_selective_scan(x, params, method="taylor", swap=None):
    """Select, discretise and scan with scalar arithmetic.

    ``swap`` optionally supplies ``{"B": ..., "C": ..., "D": ...}`` arrays that
    replace this sequence's own matrices, as in the cross scan.
    """
    x = np.asarray(x, dtype=np.float64)
    B, C, delta = naive_selection(x, params)
    D_skip = np.asarray(params.D_skip, dtype=np.float64)
    swap = swap or {}
    B, C, D_skip = swap.get("B", B), swap.get("C", C), swap.get("D", D_skip)
    A = [[-math.exp(float(v)) for v in row] for row in np.asarray(params.A_log, dtype=np.float64)]
    L, D, N = x.shape[0], x.shape[1], len(A[0])
    A_bar = [[[math.exp(delta[k][d] * A[d][n]) for n in range(N)] for d in range(D)] for k in range(L)]
    if method == "taylor":
        B_bar = [[[delta[k][d] * B[k][n] for n in range(N)] for d in range(D)] for k in range(L)]
    else:
        B_bar = [[[math.expm1(delta[k][d] * A[d][n]) / A[d][n] * B[k][n] for n in range(N)]
                  for d in range(D)] for k in range(L)]
    return np.array(naive_scan(A_bar, B_bar, C.tolist(), D_skip.tolist(), x.tolist())).reshape(L, D)


def traversal_order(H, W, direction):
    """(i, j) cells in visiting order: 0 row-major, 1 column-major, 2/3 their reversals."""
    if direction % 2 == 0:
        cells = [(i, j) for i in range(H) for j in range(W)]
    else:
        cells = [(i, j) for j in range(W) for i in range(H)]
    return cells[::-1] if direction >= 2 else cells


def naive_ss2d(F, directional_params, method="taylor"):
    F = np.asarray(F, dtype=np.float64)
    H, W, C = F.shape
    out = np.zeros_like(F)
    for d, params in enumerate(directional_params.scans):
        cells = traversal_order(H, W, d)
        seq = np.array([F[i, j] for i, j in cells])
        y = naive_selective_scan(seq, params, method)
        for k, (i, j) in enumerate(cells):
            out[i, j] += y[k]
    return out


def naive_concat_scan(seq_rgb, seq_x, params, method="taylor"):
    """Forward scan of [rgb; x] plus the backward scan reading the same selection reversed."""
    S = np.concatenate([np.asarray(seq_rgb, np.float64), np.asarray(seq_x, np.float64)])
    B, C, _ = naive_selection(S, params)
    fwd = naive_selective_scan(S, params, method)
    # backward: selection of the reversed sequence row-wise equals reversed selection
    bwd = naive_selective_scan(S[::-1], params, method, swap={"B": B[::-1], "C": C[::-1]})
    total = fwd + bwd[::-1]
    L = len(seq_rgb)
    return total[:L], total[L:]


def naive_cross_scan(seq_rgb, seq_x, params_rgb, params_x, swaps=("C",), method="taylor"):
    B_r, C_r, _ = naive_selection(seq_rgb, params_rgb)
    B_x, C_x, _ = naive_selection(seq_x, params_x)
    own_r = {"B": B_r, "C": C_r, "D": np.asarray(params_rgb.D_skip, np.float64)}
    own_x = {"B": B_x, "C": C_x, "D": np.asarray(params_x.D_skip, np.float64)}
    sw_r = {k: own_x[k] for k in swaps}
    sw_x = {k: own_r[k] for k in swaps}
    return (naive_selective_scan(seq_rgb, params_rgb, method, sw_r),
            naive_selective_scan(seq_x, params_x, method, sw_x))
