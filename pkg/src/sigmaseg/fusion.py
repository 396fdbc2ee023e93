"""Two-modality fusion: cross selective scan (CroMB) and concat selective scan (ConMB).

ConSA, the self-attention stand-in for the concat scan, lives here as well so
that its cost and shapes can be compared against ConMB.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .scan2d import (
    DIRECTIONS,
    DirectionalParams,
    ScanDirection,
    flatten_direction,
    init_directional_params,
    unflatten_direction,
)
from .ssm import (
    SelectiveSsmParams,
    derive_selection,
    init_ssm_params,
    prepare_scan,
    run_scan,
)

CONV_KERNEL = 3


class CrossExchangeMode(str, enum.Enum):
    """Which selection matrices the two modalities trade before decoding."""

    C = "C"
    B = "B"
    D = "D"
    B_AND_C = "B_and_C"
    C_AND_D = "C_and_D"

    @property
    def swaps(self):
        return frozenset(self.value.split("_and_"))

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"B&C": "B_and_C", "C&D": "C_and_D"}
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            valid = [m.value for m in cls]
            raise ConfigError(f"unknown cross exchange mode {value!r}; expected one of {valid}") from None


@dataclass
class ModalityPair:
    rgb: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        if np.shape(self.rgb) != np.shape(self.x):
            raise DimensionError(f"modalities disagree: rgb {np.shape(self.rgb)} vs x {np.shape(self.x)}")
        if np.ndim(self.rgb) != 3:
            raise DimensionError(f"modality maps must be (H, W, C), got {np.shape(self.rgb)}")

    @property
    def shape(self):
        return self.rgb.shape


# --------------------------------------------------------------------------
# cross selective scan


def cross_selective_scan(seq_rgb, seq_x, params_rgb: SelectiveSsmParams, params_x: SelectiveSsmParams,
                         mode=CrossExchangeMode.C, method="taylor", chunk=None):
    """Two recurrences that decode with each other's matrices.

    With the default mode the outputs are ``y_rgb = C_x h_rgb + D_rgb x_rgb``
    and ``y_x = C_rgb h_x + D_x x_x``; other modes trade ``B`` and/or ``D``.
    """
    mode = CrossExchangeMode.parse(mode)
    seq_rgb, seq_x = np.asarray(seq_rgb), np.asarray(seq_x)
    if seq_rgb.shape != seq_x.shape:
        raise DimensionError(f"cross scan sequences disagree: {seq_rgb.shape} vs {seq_x.shape}")
    if params_rgb.state_size != params_x.state_size:
        raise DimensionError("cross scan requires equal state sizes")
    B_r, C_r, dt_r = derive_selection(seq_rgb, params_rgb)
    B_x, C_x, dt_x = derive_selection(seq_x, params_x)
    D_r, D_x = params_rgb.D_skip, params_x.D_skip
    if "B" in mode.swaps:
        B_r, B_x = B_x, B_r
    if "C" in mode.swaps:
        C_r, C_x = C_x, C_r
    if "D" in mode.swaps:
        D_r, D_x = D_x, D_r
    y_rgb = run_scan(prepare_scan(seq_rgb, params_rgb.A, D_r, B_r, C_r, dt_r, method), chunk)
    y_x = run_scan(prepare_scan(seq_x, params_x.A, D_x, B_x, C_x, dt_x, method), chunk)
    return y_rgb, y_x


@dataclass
class CrossBranchWeights:
    """One modality's half of a CroMB block (model width C, inner width E)."""

    norm_gamma: np.ndarray
    norm_beta: np.ndarray
    W_in: np.ndarray  # (C, E)
    conv_kernel: np.ndarray  # (3, 3, E)
    conv_bias: np.ndarray  # (E,)
    W_gate: np.ndarray  # (C, E)
    scans: DirectionalParams
    W_out: np.ndarray  # (E, C)


@dataclass
class CroMBWeights:
    rgb: CrossBranchWeights
    x: CrossBranchWeights

    def swapped(self):
        return CroMBWeights(self.x, self.rgb)


def init_cross_branch(init, dim, inner, state_size):
    return CrossBranchWeights(
        norm_gamma=init.ones((dim,)),
        norm_beta=init.zeros((dim,)),
        W_in=init.trunc_normal((dim, inner)),
        conv_kernel=init.trunc_normal((CONV_KERNEL, CONV_KERNEL, inner)),
        conv_bias=init.zeros((inner,)),
        W_gate=init.trunc_normal((dim, inner)),
        scans=init_directional_params(init, inner, state_size, model_dim=dim),
        W_out=init.trunc_normal((inner, dim)),
    )


def init_cromb(init, dim, inner, state_size):
    return CroMBWeights(init_cross_branch(init, dim, inner, state_size),
                        init_cross_branch(init, dim, inner, state_size))


def _cross_pre(F, w: CrossBranchWeights):
    n = T.layer_norm(F, w.norm_gamma, w.norm_beta)
    u = T.silu(T.depthwise_conv2d(T.linear(n, w.W_in), w.conv_kernel, w.conv_bias))
    gate = T.silu(T.linear(n, w.W_gate))
    return u, gate


def cromb(pair: ModalityPair, w: CroMBWeights, mode=CrossExchangeMode.C, method="taylor", chunk=None):
    """Cross-exchange fusion block; returns enhanced (rgb, x) maps of the input shape.

    Each direction of one modality is paired with the same direction of the
    other for the cross scan; directional outputs are summed in order.
    """
    H, W, C = pair.shape
    if w.rgb.W_in.shape[0] != C:
        raise DimensionError(f"cromb: weights expect {w.rgb.W_in.shape[0]} channels, maps have {C}")
    u_r, g_r = _cross_pre(pair.rgb, w.rgb)
    u_x, g_x = _cross_pre(pair.x, w.x)
    y_r = y_x = None
    for d in DIRECTIONS:
        s_r, s_x = cross_selective_scan(
            flatten_direction(u_r, d), flatten_direction(u_x, d),
            w.rgb.scans.scans[d], w.x.scans.scans[d], mode, method, chunk)
        s_r = unflatten_direction(s_r, d, H, W)
        s_x = unflatten_direction(s_x, d, H, W)
        y_r = s_r if y_r is None else y_r + s_r
        y_x = s_x if y_x is None else y_x + s_x
    out_r = T.add(pair.rgb, T.linear(T.mul(y_r, g_r), w.rgb.W_out))
    out_x = T.add(pair.x, T.linear(T.mul(y_x, g_x), w.x.W_out))
    return out_r, out_x


# --------------------------------------------------------------------------
# concat selective scan


def concat_selective_scan(seq_rgb, seq_x, params: SelectiveSsmParams, method="taylor", chunk=None):
    """Scan ``[rgb; x]`` forwards and backwards, add, and split back in two.

    Selection is derived once on the concatenated sequence; the backward scan
    reads the same per-token matrices in reverse order.
    """
    seq_rgb, seq_x = np.asarray(seq_rgb), np.asarray(seq_x)
    if seq_rgb.shape != seq_x.shape:
        raise DimensionError(f"concat scan sequences disagree: {seq_rgb.shape} vs {seq_x.shape}")
    L = seq_rgb.shape[0]
    S = np.concatenate([seq_rgb, seq_x], axis=0)
    B, C, dt = derive_selection(S, params)
    A, D = params.A, params.D_skip
    fwd = run_scan(prepare_scan(S, A, D, B, C, dt, method), chunk)

    def rev(a):
        return np.ascontiguousarray(a[::-1])

    bwd = run_scan(prepare_scan(rev(S), A, D, rev(B), rev(C), rev(dt), method), chunk)
    total = fwd + rev(bwd)
    return total[:L], total[L:]


@dataclass
class ConMBWeights:
    W_in_rgb: np.ndarray  # (C, E)
    W_in_x: np.ndarray
    conv_kernel_rgb: np.ndarray  # (3, 3, E)
    conv_bias_rgb: np.ndarray
    conv_kernel_x: np.ndarray
    conv_bias_x: np.ndarray
    scan: SelectiveSsmParams
    scale_rgb: np.ndarray  # (1,)
    scale_x: np.ndarray  # (1,)
    W_out: np.ndarray  # (2E, C)


def init_conmb(init, dim, inner, state_size):
    return ConMBWeights(
        W_in_rgb=init.trunc_normal((dim, inner)),
        W_in_x=init.trunc_normal((dim, inner)),
        conv_kernel_rgb=init.trunc_normal((CONV_KERNEL, CONV_KERNEL, inner)),
        conv_bias_rgb=init.zeros((inner,)),
        conv_kernel_x=init.trunc_normal((CONV_KERNEL, CONV_KERNEL, inner)),
        conv_bias_x=init.zeros((inner,)),
        scan=init_ssm_params(init, inner, state_size, model_dim=dim),
        scale_rgb=init.ones((1,)),
        scale_x=init.ones((1,)),
        W_out=init.trunc_normal((2 * inner, dim)),
    )


def _concat_pre(pair, w):
    if w.W_in_rgb.shape[0] != pair.shape[2]:
        raise DimensionError(f"weights expect {w.W_in_rgb.shape[0]} channels, maps have {pair.shape[2]}")
    u_r = T.silu(T.depthwise_conv2d(T.linear(pair.rgb, w.W_in_rgb), w.conv_kernel_rgb, w.conv_bias_rgb))
    u_x = T.silu(T.depthwise_conv2d(T.linear(pair.x, w.W_in_x), w.conv_kernel_x, w.conv_bias_x))
    return u_r, u_x


def _concat_post(y_r, y_x, w):
    scaled = np.concatenate([y_r * w.scale_rgb[0], y_x * w.scale_x[0]], axis=-1)
    return T.linear(scaled, w.W_out)


def conmb(pair: ModalityPair, w: ConMBWeights, method="taylor", chunk=None):
    """Concatenated-sequence fusion block; fuses the pair into a single (H, W, C) map."""
    H, W, _ = pair.shape
    u_r, u_x = _concat_pre(pair, w)
    d = ScanDirection.ROW_MAJOR
    y_r, y_x = concat_selective_scan(flatten_direction(u_r, d), flatten_direction(u_x, d),
                                     w.scan, method, chunk)
    return _concat_post(unflatten_direction(y_r, d, H, W), unflatten_direction(y_x, d, H, W), w)


# --------------------------------------------------------------------------
# self-attention baseline


@dataclass
class ConSAWeights:
    W_in_rgb: np.ndarray
    W_in_x: np.ndarray
    conv_kernel_rgb: np.ndarray
    conv_bias_rgb: np.ndarray
    conv_kernel_x: np.ndarray
    conv_bias_x: np.ndarray
    W_q: np.ndarray  # (E, E)
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    scale_rgb: np.ndarray
    scale_x: np.ndarray
    W_out: np.ndarray  # (2E, C)


def init_consa(init, dim, inner):
    return ConSAWeights(
        W_in_rgb=init.trunc_normal((dim, inner)),
        W_in_x=init.trunc_normal((dim, inner)),
        conv_kernel_rgb=init.trunc_normal((CONV_KERNEL, CONV_KERNEL, inner)),
        conv_bias_rgb=init.zeros((inner,)),
        conv_kernel_x=init.trunc_normal((CONV_KERNEL, CONV_KERNEL, inner)),
        conv_bias_x=init.zeros((inner,)),
        W_q=init.trunc_normal((inner, inner)),
        W_k=init.trunc_normal((inner, inner)),
        W_v=init.trunc_normal((inner, inner)),
        W_o=init.trunc_normal((inner, inner)),
        scale_rgb=init.ones((1,)),
        scale_x=init.ones((1,)),
        W_out=init.trunc_normal((2 * inner, dim)),
    )


def self_attention(S, W_q, W_k, W_v, W_o):
    """Single-head ``softmax(Q K^T / sqrt(d)) V`` followed by the output projection."""
    Q, K, V = T.linear(S, W_q), T.linear(S, W_k), T.linear(S, W_v)
    scores = (Q @ K.T) / math.sqrt(Q.shape[-1])
    return T.linear(T.softmax(scores, axis=-1) @ V, W_o)


def consa_baseline(pair: ModalityPair, w: ConSAWeights):
    """ConMB with the concat scan replaced by self-attention over the 2L tokens."""
    H, W, _ = pair.shape
    u_r, u_x = _concat_pre(pair, w)
    d = ScanDirection.ROW_MAJOR
    L = H * W
    S = np.concatenate([flatten_direction(u_r, d), flatten_direction(u_x, d)], axis=0)
    out = self_attention(S, w.W_q, w.W_k, w.W_v, w.W_o)
    return _concat_post(unflatten_direction(out[:L], d, H, W), unflatten_direction(out[L:], d, H, W), w)
