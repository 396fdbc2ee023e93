"""Encoder and decoder building blocks: VSSB, CAVSSB, patch stem, patch merging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .scan2d import DirectionalParams, init_directional_params, ss2d

CONV_KERNEL = 3
PATCH = 4
ATTENTION_REDUCTION = 4


@dataclass
class VssbWeights:
    norm_gamma: np.ndarray  # (C,)
    norm_beta: np.ndarray
    W_in: np.ndarray  # (C, E)
    W_gate: np.ndarray  # (C, E)
    conv_kernel: np.ndarray  # (3, 3, E)
    conv_bias: np.ndarray
    scans: DirectionalParams
    out_gamma: np.ndarray  # (E,)
    out_beta: np.ndarray
    W_out: np.ndarray  # (E, C)

    @property
    def dim(self):
        return self.W_in.shape[0]


def init_vssb(init, dim, inner, state_size):
    return VssbWeights(
        norm_gamma=init.ones((dim,)),
        norm_beta=init.zeros((dim,)),
        W_in=init.trunc_normal((dim, inner)),
        W_gate=init.trunc_normal((dim, inner)),
        conv_kernel=init.trunc_normal((CONV_KERNEL, CONV_KERNEL, inner)),
        conv_bias=init.zeros((inner,)),
        scans=init_directional_params(init, inner, state_size, model_dim=dim),
        out_gamma=init.ones((inner,)),
        out_beta=init.zeros((inner,)),
        W_out=init.trunc_normal((inner, dim)),
    )


def vssb_branch(F, w: VssbWeights, method="taylor", chunk=None):
    """The residual branch of a VSSB (everything except ``F +``)."""
    F = np.asarray(F)
    if F.ndim != 3 or F.shape[2] != w.dim:
        raise DimensionError(f"vssb: map {F.shape} does not have {w.dim} channels")
    n = T.layer_norm(F, w.norm_gamma, w.norm_beta)
    u = T.silu(T.depthwise_conv2d(T.linear(n, w.W_in), w.conv_kernel, w.conv_bias))
    y = T.layer_norm(ss2d(u, w.scans, method, chunk), w.out_gamma, w.out_beta)
    gate = T.silu(T.linear(n, w.W_gate))
    return T.linear(T.mul(y, gate), w.W_out)


def vssb(F, w: VssbWeights, method="taylor", chunk=None):
    """Visual state space block: ``F + W_out(LN(SS2D(silu(DWConv(W_in LN F)))) * silu(W_gate LN F))``."""
    return T.add(np.asarray(F), vssb_branch(F, w, method, chunk))


@dataclass
class ChannelAttentionWeights:
    W_1: np.ndarray  # (C, C/r)
    b_1: np.ndarray
    W_2: np.ndarray  # (C/r, C)
    b_2: np.ndarray


@dataclass
class CavssbWeights:
    vssb: VssbWeights
    attention: ChannelAttentionWeights


def init_cavssb(init, dim, inner, state_size):
    hidden = max(1, dim // ATTENTION_REDUCTION)
    return CavssbWeights(
        vssb=init_vssb(init, dim, inner, state_size),
        attention=ChannelAttentionWeights(
            W_1=init.trunc_normal((dim, hidden)),
            b_1=init.zeros((hidden,)),
            W_2=init.trunc_normal((hidden, dim)),
            b_2=init.zeros((dim,)),
        ),
    )


def channel_attention(F, w: ChannelAttentionWeights):
    """Per-channel weights in (0, 1) from a shared MLP over avg- and max-pooled maps."""

    def mlp(v):
        return T.linear(T.relu(T.linear(v, w.W_1, w.b_1)), w.W_2, w.b_2)

    return T.sigmoid(mlp(T.global_pool(F, "avg")) + mlp(T.global_pool(F, "max")))


def cavssb(F, w: CavssbWeights, method="taylor", chunk=None, return_attention=False):
    """Channel-aware VSSB: ``F1 = vssb(F)``; ``out = F1 + a * F1``."""
    F1 = vssb(F, w.vssb, method, chunk)
    a = channel_attention(F1, w.attention)
    out = F1 + F1 * T.broadcast(a, F1.shape)
    return (out, a) if return_attention else out


@dataclass
class StemWeights:
    W: np.ndarray  # (4*4*3, C1)
    b: np.ndarray
    norm_gamma: np.ndarray
    norm_beta: np.ndarray


def init_stem(init, dim, in_channels=3):
    return StemWeights(
        W=init.trunc_normal((PATCH * PATCH * in_channels, dim)),
        b=init.zeros((dim,)),
        norm_gamma=init.ones((dim,)),
        norm_beta=init.zeros((dim,)),
    )


def patchify(I, p):
    """(H, W, C) -> (H/p, W/p, p*p*C), each patch flattened in (dy, dx, c) order."""
    H, W, C = I.shape
    if H % p or W % p:
        raise ConfigError(f"spatial extents {H}x{W} are not divisible by {p}")
    return I.reshape(H // p, p, W // p, p, C).transpose(0, 2, 1, 3, 4).reshape(H // p, W // p, p * p * C)


def patch_stem(I, w: StemWeights, normalize=True):
    """Non-overlapping 4x4 patch embedding followed by layer norm."""
    I = np.asarray(I)
    if I.ndim != 3:
        raise DimensionError(f"patch_stem: expected (H, W, 3) image, got {I.shape}")
    F = T.linear(patchify(I, PATCH), w.W, w.b)
    if normalize:
        F = T.layer_norm(F, w.norm_gamma, w.norm_beta)
    return F


@dataclass
class DownsampleWeights:
    norm_gamma: np.ndarray  # (4C,)
    norm_beta: np.ndarray
    W: np.ndarray  # (4C, 2C)


def init_downsample(init, dim, out_dim=None):
    out_dim = 2 * dim if out_dim is None else out_dim
    return DownsampleWeights(
        norm_gamma=init.ones((4 * dim,)),
        norm_beta=init.zeros((4 * dim,)),
        W=init.trunc_normal((4 * dim, out_dim)),
    )


def downsample(F, w: DownsampleWeights):
    """2x2 patch merging: gather, layer norm over 4C, project to the next width."""
    F = np.asarray(F)
    if F.ndim != 3:
        raise DimensionError(f"downsample: expected (H, W, C), got {F.shape}")
    if F.shape[0] % 2 or F.shape[1] % 2:
        raise ConfigError(f"downsample: extents {F.shape[0]}x{F.shape[1]} must be even")
    merged = patchify(F, 2)
    return T.linear(T.layer_norm(merged, w.norm_gamma, w.norm_beta), w.W)
