"""Analytic operation counts for every block of the forward graph.

Counting convention
-------------------
* one multiply-accumulate (MAC) in a matmul, convolution or recurrence
  counts as ``flops_per_mac`` FLOPs, 1 by default. This is the convention
  under which published segmentation FLOP figures are usually quoted.
* every other elementwise operation (add, scale, exp, softmax element,
  activation) counts as 1 FLOP per element; SiLU counts 2 (sigmoid + product),
  layer norm counts 5 per element.

Counts are returned as :class:`Cost` objects keyed by term name so that any
deviation from a reference figure can be itemised.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .ssm import default_dt_rank

LAYER_NORM_OPS = 5
SILU_OPS = 2
SCAN_ELEMENTWISE_OPS = 4  # delta*A, exp, delta*B, (delta*B)*x per (l, d, n)
SCAN_MACS = 2  # state update and readout per (l, d, n)
UPSAMPLE_OPS = 6  # per output element: two lerps


@dataclass
class Cost:
    flops_per_mac: float = 1.0
    terms: OrderedDict = field(default_factory=OrderedDict)

    def add(self, name, flops):
        self.terms[name] = self.terms.get(name, 0.0) + float(flops)
        return self

    def macs(self, name, macs):
        return self.add(name, macs * self.flops_per_mac)

    def merge(self, other, prefix=""):
        for name, value in other.terms.items():
            self.add(f"{prefix}{name}", value)
        return self

    def child(self):
        return Cost(self.flops_per_mac)

    @property
    def total(self):
        return float(sum(self.terms.values()))

    def grouped(self, depth=1):
        out = OrderedDict()
        for name, value in self.terms.items():
            key = ".".join(name.split(".")[:depth])
            out[key] = out.get(key, 0.0) + value
        return out


# --------------------------------------------------------------------------
# primitives


def linear_cost(cost, name, tokens, d_in, d_out, bias=False):
    cost.macs(name, tokens * d_in * d_out)
    if bias:
        cost.add(name, tokens * d_out)
    return cost


def dwconv_cost(cost, name, tokens, channels, k=3):
    cost.macs(name, tokens * channels * k * k)
    cost.add(name, tokens * channels)  # bias
    return cost


def selection_cost(cost, tokens, inner, state_size, dt_rank):
    cost.macs("selection_proj", tokens * inner * 2 * state_size)
    cost.macs("selection_proj", tokens * inner * dt_rank + tokens * dt_rank * inner)
    cost.add("selection_proj", 2 * tokens * inner)  # bias + softplus
    return cost


def scan_cost(cost, length, inner, state_size):
    elems = length * inner * state_size
    cost.add("scan", SCAN_ELEMENTWISE_OPS * elems)
    cost.macs("scan", SCAN_MACS * elems + length * inner)  # + skip D*x
    return cost


def selective_scan_cost(cost, length, inner, state_size, dt_rank):
    selection_cost(cost, length, inner, state_size, dt_rank)
    return scan_cost(cost, length, inner, state_size)


# --------------------------------------------------------------------------
# fusion blocks


def conm_cost(H, W, C, N, expand=2, flops_per_mac=1.0):
    """ConMB: per-modality Linear + DWConv, concat scan (forward and inverse), scale, project."""
    M, E, R = H * W, expand * C, default_dt_rank(C)
    cost = Cost(flops_per_mac)
    linear_cost(cost, "in_proj", 2 * M, C, E)
    dwconv_cost(cost, "dwconv", 2 * M, E)
    cost.add("activation", SILU_OPS * 2 * M * E)
    selection_cost(cost, 2 * M, E, N, R)  # derived once, read in both directions
    scan_cost(cost, 2 * M, E, N)
    scan_cost(cost, 2 * M, E, N)
    cost.add("merge", 2 * M * E)
    cost.add("scale", 2 * M * E)
    linear_cost(cost, "out_proj", M, 2 * E, C)
    return cost


def consa_cost(H, W, C, expand=2, flops_per_mac=1.0):
    """ConSA: ConMB with single-head self-attention over the 2HW concatenated tokens."""
    M, E = H * W, expand * C
    L = 2 * M
    cost = Cost(flops_per_mac)
    linear_cost(cost, "in_proj", 2 * M, C, E)
    dwconv_cost(cost, "dwconv", 2 * M, E)
    cost.add("activation", SILU_OPS * 2 * M * E)
    linear_cost(cost, "qkv_proj", L, E, 3 * E)
    cost.macs("attention_scores", L * L * E)
    cost.add("softmax", 3 * L * L)  # scale, exp, normalise
    cost.macs("attention_values", L * L * E)
    linear_cost(cost, "attn_out_proj", L, E, E)
    cost.add("scale", 2 * M * E)
    linear_cost(cost, "out_proj", M, 2 * E, C)
    return cost


def cromb_cost(H, W, C, N, expand=2, flops_per_mac=1.0):
    M, E, R = H * W, expand * C, default_dt_rank(C)
    cost = Cost(flops_per_mac)
    for _ in range(2):
        cost.add("norm", LAYER_NORM_OPS * M * C)
        linear_cost(cost, "in_proj", M, C, E)
        dwconv_cost(cost, "dwconv", M, E)
        cost.add("activation", SILU_OPS * M * E)
        linear_cost(cost, "gate_proj", M, C, E)
        cost.add("activation", SILU_OPS * M * E)
        for _ in range(4):
            selective_scan_cost(cost, M, E, N, R)
            cost.add("merge", M * E)
        cost.add("gate", M * E)
        linear_cost(cost, "out_proj", M, E, C)
        cost.add("residual", M * C)
    return cost


# --------------------------------------------------------------------------
# encoder / decoder blocks


def vssb_cost(H, W, C, N, expand=2, flops_per_mac=1.0):
    M, E, R = H * W, expand * C, default_dt_rank(C)
    cost = Cost(flops_per_mac)
    cost.add("norm", LAYER_NORM_OPS * M * C)
    linear_cost(cost, "in_proj", M, C, E)
    linear_cost(cost, "gate_proj", M, C, E)
    dwconv_cost(cost, "dwconv", M, E)
    cost.add("activation", 2 * SILU_OPS * M * E)
    for _ in range(4):
        selective_scan_cost(cost, M, E, N, R)
        cost.add("merge", M * E)
    cost.add("norm", LAYER_NORM_OPS * M * E)
    cost.add("gate", M * E)
    linear_cost(cost, "out_proj", M, E, C)
    cost.add("residual", M * C)
    return cost


def cavssb_cost(H, W, C, N, expand=2, flops_per_mac=1.0):
    from .blocks import ATTENTION_REDUCTION

    M, hidden = H * W, max(1, C // ATTENTION_REDUCTION)
    cost = vssb_cost(H, W, C, N, expand, flops_per_mac)
    cost.add("pool", 2 * M * C)
    for _ in range(2):
        linear_cost(cost, "channel_mlp", 1, C, hidden, bias=True)
        linear_cost(cost, "channel_mlp", 1, hidden, C, bias=True)
    cost.add("channel_gate", C + 2 * M * C)  # sigmoid, F1*a, F1 + .
    return cost


def stem_cost(H, W, C, flops_per_mac=1.0):
    from .blocks import PATCH

    M = (H // PATCH) * (W // PATCH)
    cost = Cost(flops_per_mac)
    linear_cost(cost, "patch_embed", M, PATCH * PATCH * 3, C, bias=True)
    cost.add("norm", LAYER_NORM_OPS * M * C)
    return cost


def downsample_cost(H, W, C, C_out, flops_per_mac=1.0):
    """Patch merging of an (H, W, C) map."""
    M = (H // 2) * (W // 2)
    cost = Cost(flops_per_mac)
    cost.add("norm", LAYER_NORM_OPS * M * 4 * C)
    linear_cost(cost, "merge_proj", M, 4 * C, C_out)
    return cost


def model_flops(cfg, H, W):
    """Itemised cost of one forward pass (both encoder branches) at H x W."""
    shapes = cfg.pyramid_shapes(H, W)
    N, ex = cfg.state_size, cfg.expand
    total = Cost()

    enc = Cost()
    enc.merge(stem_cost(H, W, cfg.stage_dims[0]), "stem.")
    for k, (h, w, c) in enumerate(shapes):
        if k:
            ph, pw, pc = shapes[k - 1]
            enc.merge(downsample_cost(ph, pw, pc, c), f"downsample{k}.")
        for _ in range(cfg.stage_depths[k]):
            enc.merge(vssb_cost(h, w, c, N, ex), f"stage{k + 1}.")
    total.merge(enc, "encoder_rgb.").merge(enc, "encoder_x.")

    for k, (h, w, c) in enumerate(shapes):
        if cfg.fusion_mode in ("full", "cromb_only"):
            total.merge(cromb_cost(h, w, c, N, ex), f"fusion.cromb{k + 1}.")
        if cfg.fusion_mode in ("full", "conmb_only"):
            total.merge(conm_cost(h, w, c, N, ex), f"fusion.conmb{k + 1}.")
        if cfg.fusion_mode == "cromb_only":
            total.add(f"fusion.average{k + 1}", 2 * h * w * c)
        if cfg.fusion_mode == "sum":
            total.add(f"fusion.sum{k + 1}", h * w * c)

    h1, w1, c1 = shapes[0]
    if cfg.decoder_kind == "cavssb":
        for g in range(3):
            k = 3 - g
            h, w, c = shapes[k - 1]
            total.add(f"decoder.upsample{g + 1}", UPSAMPLE_OPS * h * w * shapes[k][2])
            linear_cost(total, f"decoder.proj{g + 1}", h * w, shapes[k][2], c)
            total.add(f"decoder.skip{g + 1}", h * w * c)
            for _ in range(cfg.decoder_depths[g]):
                total.merge(cavssb_cost(h, w, c, N, ex), f"decoder.group{g + 1}.")
    else:
        for k, (h, w, c) in enumerate(shapes):
            linear_cost(total, f"decoder.proj{k + 1}", h * w, c, c1)
            if k:
                total.add(f"decoder.upsample{k + 1}", UPSAMPLE_OPS * h1 * w1 * c1)
        linear_cost(total, "decoder.fuse", h1 * w1, 4 * c1, c1)

    linear_cost(total, "classifier.hidden", h1 * w1, c1, c1, bias=True)
    total.add("classifier.activation", SILU_OPS * h1 * w1 * c1)
    linear_cost(total, "classifier.out", h1 * w1, c1, cfg.num_classes, bias=True)
    return total
