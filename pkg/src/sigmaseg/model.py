"""Sigma assembly: Siamese encoder, per-level fusion, channel-aware decoder, classifier."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    CavssbWeights,
    DownsampleWeights,
    StemWeights,
    VssbWeights,
    cavssb,
    downsample,
    init_cavssb,
    init_downsample,
    init_stem,
    init_vssb,
    patch_stem,
    vssb,
)
from .errors import ConfigError, DimensionError
from .fusion import (
    ConMBWeights,
    CroMBWeights,
    CrossExchangeMode,
    ModalityPair,
    conmb,
    cromb,
    init_conmb,
    init_cromb,
)

FUSION_MODES = ("full", "cromb_only", "conmb_only", "sum")
DECODER_KINDS = ("cavssb", "mlp")
NUM_STAGES = 4
# input extents must be divisible by the coarsest stride
INPUT_STRIDE = 32

PRESETS = {
    "tiny": dict(stage_depths=(2, 2, 9, 2), stage_dims=(96, 192, 384, 768)),
    "small": dict(stage_depths=(2, 2, 27, 2), stage_dims=(96, 192, 384, 768)),
    "base": dict(stage_depths=(2, 2, 27, 2), stage_dims=(128, 256, 512, 1024)),
}


@dataclass(frozen=True)
class SigmaConfig:
    stage_depths: tuple = PRESETS["tiny"]["stage_depths"]
    stage_dims: tuple = PRESETS["tiny"]["stage_dims"]
    state_size: int = 4
    decoder_depths: tuple = (4, 4, 4)
    num_classes: int = 9
    fusion_mode: str = "full"
    decoder_kind: str = "cavssb"
    cross_mode: str = "C"
    expand: int = 2
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))
        object.__setattr__(self, "decoder_depths", tuple(int(d) for d in self.decoder_depths))
        object.__setattr__(self, "cross_mode", CrossExchangeMode.parse(self.cross_mode).value)
        if len(self.stage_depths) != NUM_STAGES or len(self.stage_dims) != NUM_STAGES:
            raise ConfigError("stage_depths and stage_dims need exactly four entries")
        if len(self.decoder_depths) != NUM_STAGES - 1:
            raise ConfigError("decoder_depths needs exactly three entries")
        if any(d < 0 for d in self.stage_depths + self.decoder_depths):
            raise ConfigError("block counts must be non-negative")
        if any(c < 1 for c in self.stage_dims):
            raise ConfigError("stage dims must be positive")
        if self.state_size < 1 or self.num_classes < 1 or self.expand < 1:
            raise ConfigError("state_size, num_classes and expand must be positive")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"decoder_kind must be one of {DECODER_KINDS}, got {self.decoder_kind!r}")
        T.as_dtype(self.dtype)

    @classmethod
    def preset(cls, name, **overrides):
        try:
            base = PRESETS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        out = dataclasses.asdict(self)
        for key in ("stage_depths", "stage_dims", "decoder_depths"):
            out[key] = list(out[key])
        return out

    def config_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def np_dtype(self):
        return T.as_dtype(self.dtype)

    def inner(self, dim):
        return self.expand * dim

    def pyramid_shapes(self, H, W):
        check_input_extent(H, W)
        return [(H // 2 ** (k + 2), W // 2 ** (k + 2), c) for k, c in enumerate(self.stage_dims)]


def check_input_extent(H, W):
    if H < INPUT_STRIDE or W < INPUT_STRIDE or H % INPUT_STRIDE or W % INPUT_STRIDE:
        raise ConfigError(f"input extents {H}x{W} must be positive multiples of {INPUT_STRIDE}")


@dataclass
class StageFeatures:
    """Four-level feature pyramid at strides 4, 8, 16, 32."""

    levels: list = field(default_factory=list)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, k):
        return self.levels[k]

    def __iter__(self):
        return iter(self.levels)

    @property
    def shapes(self):
        return [f.shape for f in self.levels]


@dataclass
class SegmentationMap:
    labels: np.ndarray  # (H, W) integer class indices
    num_classes: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DimensionError(f"label map must be 2-D, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DimensionError("label outside [0, num_classes)")


# --------------------------------------------------------------------------
# weights


@dataclass
class EncoderWeights:
    stem: StemWeights
    downsamples: list  # three DownsampleWeights
    stages: list  # four lists of VssbWeights


@dataclass
class FusionLevelWeights:
    cromb: CroMBWeights | None = None
    conmb: ConMBWeights | None = None


@dataclass
class DecoderWeights:
    groups: list = field(default_factory=list)  # cavssb: CavssbWeights at widths C3, C2, C1
    projections: list = field(default_factory=list)  # cavssb: C_k -> C_{k-1}; mlp: C_k -> C_1
    fuse: np.ndarray | None = None  # mlp only: (4 C_1, C_1)


@dataclass
class ClassifierWeights:
    W_hidden: np.ndarray
    b_hidden: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray


@dataclass
class SigmaWeights:
    encoder: EncoderWeights
    fusion: list  # four FusionLevelWeights
    decoder: DecoderWeights
    classifier: ClassifierWeights


def init_weights(cfg: SigmaConfig, seed=None):
    """Seeded random weights, or a zero-filled shape template when ``seed`` is None."""
    rng = None if seed is None else np.random.default_rng(seed)
    init = T.WeightInit(rng, cfg.np_dtype)
    dims, N = cfg.stage_dims, cfg.state_size

    encoder = EncoderWeights(
        stem=init_stem(init, dims[0]),
        downsamples=[init_downsample(init, dims[k], dims[k + 1]) for k in range(NUM_STAGES - 1)],
        stages=[[init_vssb(init, dims[k], cfg.inner(dims[k]), N) for _ in range(cfg.stage_depths[k])]
                for k in range(NUM_STAGES)],
    )

    fusion = []
    for c in dims:
        level = FusionLevelWeights()
        if cfg.fusion_mode in ("full", "cromb_only"):
            level.cromb = init_cromb(init, c, cfg.inner(c), N)
        if cfg.fusion_mode in ("full", "conmb_only"):
            level.conmb = init_conmb(init, c, cfg.inner(c), N)
        fusion.append(level)

    decoder = DecoderWeights()
    if cfg.decoder_kind == "cavssb":
        for g in range(NUM_STAGES - 1):
            k = NUM_STAGES - 1 - g
            decoder.projections.append(init.trunc_normal((dims[k], dims[k - 1])))
            decoder.groups.append([init_cavssb(init, dims[k - 1], cfg.inner(dims[k - 1]), N)
                                   for _ in range(cfg.decoder_depths[g])])
    else:
        decoder.projections = [init.trunc_normal((c, dims[0])) for c in dims]
        decoder.fuse = init.trunc_normal((NUM_STAGES * dims[0], dims[0]))

    classifier = ClassifierWeights(
        W_hidden=init.trunc_normal((dims[0], dims[0])),
        b_hidden=init.zeros((dims[0],)),
        W_out=init.trunc_normal((dims[0], cfg.num_classes)),
        b_out=init.zeros((cfg.num_classes,)),
    )
    return SigmaWeights(encoder, fusion, decoder, classifier)


def named_arrays(obj, prefix=""):
    """Yield ``(dotted_name, array)`` for every parameter array in a weight tree."""
    if obj is None:
        return
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}.{i}" if prefix else str(i))
    else:
        raise TypeError(f"unexpected weight node {type(obj).__name__} at {prefix!r}")


def replace_arrays(template, arrays, prefix=""):
    """Copy of ``template`` with every array taken from the ``arrays`` mapping."""
    if template is None:
        return None
    if isinstance(template, np.ndarray):
        return arrays[prefix]
    if dataclasses.is_dataclass(template):
        changes = {}
        for f in dataclasses.fields(template):
            name = f"{prefix}.{f.name}" if prefix else f.name
            changes[f.name] = replace_arrays(getattr(template, f.name), arrays, name)
        return dataclasses.replace(template, **changes)
    if isinstance(template, list):
        return [replace_arrays(item, arrays, f"{prefix}.{i}" if prefix else str(i))
                for i, item in enumerate(template)]
    raise TypeError(f"unexpected weight node {type(template).__name__} at {prefix!r}")


def count_params(cfg: SigmaConfig):
    """Total number of scalar parameters, enumerated over every weight array."""
    return sum(a.size for _, a in named_arrays(init_weights(cfg)))


def count_flops(cfg: SigmaConfig, H, W):
    """Forward-pass GFLOPs at an ``H x W`` input (see :mod:`sigmaseg.flops`)."""
    from .flops import model_flops

    return model_flops(cfg, H, W).total / 1e9


# --------------------------------------------------------------------------
# forward pass


def _as_image(I, dtype):
    I = np.asarray(I, dtype=dtype)
    if I.ndim != 3 or I.shape[2] != 3:
        raise DimensionError(f"images must be (H, W, 3), got {I.shape}")
    check_input_extent(I.shape[0], I.shape[1])
    return I


def encode(I, enc: EncoderWeights, method="taylor", chunk="auto"):
    F = patch_stem(I, enc.stem)
    levels = []
    for k, blocks in enumerate(enc.stages):
        if k > 0:
            F = downsample(F, enc.downsamples[k - 1])
        for w in blocks:
            F = vssb(F, w, method, chunk)
        levels.append(F)
    return StageFeatures(levels)


def encode_siamese(I_rgb, I_x, weights: SigmaWeights, cfg: SigmaConfig, method="taylor", chunk="auto"):
    """Both modalities through the same encoder weights."""
    I_rgb = _as_image(I_rgb, cfg.np_dtype)
    I_x = _as_image(I_x, cfg.np_dtype)
    if I_rgb.shape != I_x.shape:
        raise DimensionError(f"modalities disagree: {I_rgb.shape} vs {I_x.shape}")
    return encode(I_rgb, weights.encoder, method, chunk), encode(I_x, weights.encoder, method, chunk)


def fuse_levels(pyr_rgb: StageFeatures, pyr_x: StageFeatures, fusion, cfg: SigmaConfig,
                method="taylor", chunk="auto"):
    if len(pyr_rgb) != NUM_STAGES or len(pyr_x) != NUM_STAGES or len(fusion) != NUM_STAGES:
        raise DimensionError("fusion needs four aligned pyramid levels")
    mode = cfg.fusion_mode
    fused = []
    for F_r, F_x, w in zip(pyr_rgb, pyr_x, fusion):
        pair = ModalityPair(F_r, F_x)
        if mode == "sum":
            out = T.add(F_r, F_x)
        elif mode == "conmb_only":
            out = conmb(pair, _need(w.conmb, mode), method, chunk)
        else:
            hat_r, hat_x = cromb(pair, _need(w.cromb, mode), cfg.cross_mode, method, chunk)
            if mode == "cromb_only":
                out = 0.5 * (hat_r + hat_x)
            else:
                out = conmb(ModalityPair(hat_r, hat_x), _need(w.conmb, mode), method, chunk)
        fused.append(out)
    return StageFeatures(fused)


def _need(w, mode):
    if w is None:
        raise ConfigError(f"fusion weights missing for fusion_mode={mode!r}")
    return w


def classify(F, w: ClassifierWeights):
    return T.linear(T.silu(T.linear(F, w.W_hidden, w.b_hidden)), w.W_out, w.b_out)


def decode(fused: StageFeatures, weights: SigmaWeights, cfg: SigmaConfig, method="taylor", chunk="auto"):
    """Logits at stride 4: (H/4, W/4, num_classes).

    The channel-aware decoder walks up from the coarsest level: upsample x2,
    project to the next level's width, add that level's fused map, then refine
    with a group of CAVSSBs.
    """
    if len(fused) != NUM_STAGES:
        raise DimensionError("decoder needs four fused levels")
    dec = weights.decoder
    if cfg.decoder_kind == "cavssb":
        x = fused[NUM_STAGES - 1]
        for g, blocks in enumerate(dec.groups):
            x = T.linear(T.upsample_bilinear(x, 2), dec.projections[g])
            x = T.add(x, fused[NUM_STAGES - 2 - g])
            for w in blocks:
                x = cavssb(x, w, method, chunk)
    else:
        parts = []
        for k, (F, P) in enumerate(zip(fused, dec.projections)):
            y = T.linear(F, P)
            parts.append(T.upsample_bilinear(y, 2 ** k) if k else y)
        x = T.linear(np.concatenate(parts, axis=-1), dec.fuse)
    return classify(x, weights.classifier)


def forward(I_rgb, I_x, weights: SigmaWeights, cfg: SigmaConfig, method="taylor", chunk="auto"):
    pyr_rgb, pyr_x = encode_siamese(I_rgb, I_x, weights, cfg, method, chunk)
    fused = fuse_levels(pyr_rgb, pyr_x, weights.fusion, cfg, method, chunk)
    return decode(fused, weights, cfg, method, chunk)


def labels_from_logits(logits, num_classes):
    """Upsample stride-4 logits to full resolution and take the arg-max (lowest index wins ties)."""
    full = T.upsample_bilinear(logits, 4)
    return SegmentationMap(np.argmax(full, axis=-1).astype(np.int64), num_classes)


def predict(I_rgb, I_x, weights: SigmaWeights, cfg: SigmaConfig, method="taylor", chunk="auto"):
    return labels_from_logits(forward(I_rgb, I_x, weights, cfg, method, chunk), cfg.num_classes)


def predict_rgb_only(I_rgb, weights: SigmaWeights, cfg: SigmaConfig, method="taylor", chunk="auto"):
    """Single-modality reference path: encoder and decoder without any fusion."""
    pyr = encode(_as_image(I_rgb, cfg.np_dtype), weights.encoder, method, chunk)
    return labels_from_logits(decode(pyr, weights, cfg, method, chunk), cfg.num_classes)
