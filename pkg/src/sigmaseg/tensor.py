"""Dense array primitives used by every block.

Arrays are plain row-major ``numpy.ndarray`` objects in ``float32`` (inference)
or ``float64`` (verification). Operations never broadcast implicitly: shape
mismatches raise :class:`DimensionError`, and :func:`broadcast` is the only
way to expand an array.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError

LAYER_NORM_EPS = 1e-5
DTYPES = {"f32": np.float32, "f64": np.float64}


def as_dtype(name):
    try:
        return np.dtype(DTYPES[name])
    except KeyError:
        raise ConfigError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None


def _require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def broadcast(x, shape):
    """Explicitly expand ``x`` to ``shape`` (numpy broadcasting rules)."""
    x = np.asarray(x)
    try:
        return np.broadcast_to(x, tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from exc


def add(a, b):
    _require_same_shape(a, b, "add")
    return a + b


def mul(a, b):
    _require_same_shape(a, b, "mul")
    return a * b


def linear(x, W, b=None):
    """Affine map over the last axis: ``x @ W + b``."""
    x = np.asarray(x)
    W = np.asarray(W)
    if W.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-D, got shape {W.shape}")
    if x.ndim == 0 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {W.shape}")
    out = x @ W
    if b is not None:
        b = np.asarray(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out = out + b
    return out


def depthwise_conv2d(x, kernel, bias=None):
    """Per-channel 2-D convolution with zero 'same' padding.

    ``x`` is (H, W, C), ``kernel`` is (k, k, C) with odd ``k``. Taps are
    accumulated in raster order so results are reproducible bit for bit.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 3:
        raise DimensionError(f"depthwise_conv2d: expected (H, W, C) input, got {x.shape}")
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"depthwise_conv2d: expected (k, k, C) kernel, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    H, W, C = x.shape
    if kernel.shape[2] != C:
        raise DimensionError(f"depthwise_conv2d: kernel has {kernel.shape[2]} channels, input has {C}")
    r = k // 2
    padded = np.zeros((H + 2 * r, W + 2 * r, C), dtype=np.result_type(x, kernel))
    padded[r:r + H, r:r + W] = x
    out = np.zeros((H, W, C), dtype=padded.dtype)
    for i in range(k):
        for j in range(k):
            out += padded[i:i + H, j:j + W] * kernel[i, j]
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (C,):
            raise DimensionError(f"depthwise_conv2d: bias {bias.shape} does not match {C} channels")
        out += bias
    return out


def layer_norm(x, gamma, beta, eps=LAYER_NORM_EPS):
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    x = np.asarray(x)
    C = x.shape[-1]
    if np.shape(gamma) != (C,) or np.shape(beta) != (C,):
        raise DimensionError(
            f"layer_norm: affine params {np.shape(gamma)}/{np.shape(beta)} do not match {C} channels")
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / np.sqrt(var + eps) * gamma + beta


def sigmoid(x):
    # exp(-|x|) never overflows; both branches are exact rearrangements
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def silu(x):
    x = np.asarray(x)
    return x * sigmoid(x)


def softplus(x):
    x = np.asarray(x)
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def relu(x):
    return np.maximum(x, 0)


def softmax(x, axis=-1):
    x = np.asarray(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def global_pool(x, mode="avg"):
    """Reduce an (H, W, C) map to a (C,) vector by spatial mean or max."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"global_pool: expected (H, W, C) input, got {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError("global_pool: empty spatial extent")
    flat = x.reshape(-1, x.shape[2])
    if mode == "avg":
        return flat.sum(axis=0) / flat.shape[0]
    if mode == "max":
        return flat.max(axis=0)
    raise ConfigError(f"global_pool: unknown mode {mode!r}")


def _bilinear_axis(n_in, factor):
    # align_corners=False source coordinates, clamped at the borders
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def upsample_bilinear(x, factor):
    """Bilinear upsampling of an (H, W, C) map by an integer factor >= 2."""
    x = np.asarray(x)
    if not isinstance(factor, (int, np.integer)) or factor < 2:
        raise ConfigError(f"upsample_bilinear: factor must be an integer >= 2, got {factor!r}")
    if x.ndim != 3:
        raise DimensionError(f"upsample_bilinear: expected (H, W, C) input, got {x.shape}")
    H, W, _ = x.shape
    lo, hi, w = _bilinear_axis(H, factor)
    w = w.astype(x.dtype)[:, None, None]
    rows = x[lo] * (1 - w) + x[hi] * w
    lo, hi, w = _bilinear_axis(W, factor)
    w = w.astype(x.dtype)[None, :, None]
    return rows[:, lo] * (1 - w) + rows[:, hi] * w


class WeightInit:
    """Deterministic parameter factory.

    With ``rng=None`` every method returns zeros of the requested shape, which
    gives a cheap shape template (``np.zeros`` does not touch the pages) for
    parameter counting and bundle validation.
    """

    def __init__(self, rng=None, dtype=np.float32):
        self.rng = rng
        self.dtype = np.dtype(dtype)

    @property
    def template(self):
        return self.rng is None

    def zeros(self, shape):
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, shape):
        if self.template:
            return self.zeros(shape)
        return np.ones(shape, dtype=self.dtype)

    def full(self, shape, value):
        if self.template:
            return self.zeros(shape)
        return np.full(shape, value, dtype=self.dtype)

    def values(self, fn, shape):
        """Array computed by ``fn()`` (skipped in template mode)."""
        if self.template:
            return self.zeros(shape)
        out = np.asarray(fn(), dtype=self.dtype)
        if out.shape != tuple(np.atleast_1d(shape)):
            raise DimensionError(f"initializer produced {out.shape}, expected {shape}")
        return out

    def uniform(self, shape, low, high):
        if self.template:
            return self.zeros(shape)
        return self.rng.uniform(low, high, size=shape).astype(self.dtype)

    def trunc_normal(self, shape, std=0.02, bound=2.0):
        """Normal(0, std) truncated to +-bound*std by redrawing outliers."""
        if self.template:
            return self.zeros(shape)
        draw_dtype = self.dtype if self.dtype in (np.float32, np.float64) else np.float64
        out = self.rng.standard_normal(size=shape, dtype=draw_dtype)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.rng.standard_normal(size=int(bad.sum()), dtype=draw_dtype)
            bad = np.abs(out) > bound
        out *= std
        return out.astype(self.dtype, copy=False)
