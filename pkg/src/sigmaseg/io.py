"""File formats: binary tensors, weight bundles, JSON configs, PPM images, reports.

TensorFile layout (little-endian)::

    b"SGT1" | u32 dtype code (1=f32, 2=f64) | u32 rank | u32 dims[rank] | payload

WeightBundle layout::

    b"SGW1" | u32 manifest length | manifest JSON (utf-8) | TensorFile records

The manifest holds the config, its hash, and ``name -> {shape, dtype, offset}``
with offsets relative to the first byte after the manifest.
"""

from __future__ import annotations

import csv
import json
import os
import struct

import numpy as np

from .errors import ConfigError, ParseError
from .model import SigmaConfig, init_weights, named_arrays, replace_arrays

TENSOR_MAGIC = b"SGT1"
BUNDLE_MAGIC = b"SGW1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_OF = {"float32": 1, "float64": 2}
DTYPE_NAMES = {1: "f32", 2: "f64"}

# Unlabeled, Car, Person, Bike, Curve, Car stop, Guardrail, Color cone, Bump
MFNET_PALETTE = (
    (0, 0, 0),
    (64, 0, 128),
    (64, 64, 0),
    (0, 128, 192),
    (0, 0, 192),
    (128, 128, 0),
    (64, 64, 128),
    (192, 128, 128),
    (192, 64, 0),
)
MFNET_CLASSES = ("unlabeled", "car", "person", "bike", "curve", "car_stop", "guardrail", "color_cone", "bump")


# --------------------------------------------------------------------------
# tensors


def encode_tensor(arr):
    arr = np.asarray(arr)
    code = CODE_OF.get(arr.dtype.name)
    if code is None:
        raise ConfigError(f"TensorFile stores f32 or f64, got {arr.dtype}")
    head = TENSOR_MAGIC + struct.pack(f"<II{arr.ndim}I", code, arr.ndim, *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(buf, offset=0):
    """Parse one TensorFile record starting at ``offset``; returns ``(array, end_offset)``."""
    buf = memoryview(buf)
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise ParseError("bad tensor magic", offset)
    if len(buf) < offset + 12:
        raise ParseError("truncated tensor header", len(buf))
    code, rank = struct.unpack_from("<II", buf, offset + 4)
    if code not in DTYPE_CODES:
        raise ParseError(f"unknown dtype code {code}", offset + 4)
    pos = offset + 12
    if len(buf) < pos + 4 * rank:
        raise ParseError("truncated tensor dims", len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = DTYPE_CODES[code]
    nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(buf) < pos + nbytes:
        raise ParseError(f"payload holds {len(buf) - pos} bytes, shape {dims} needs {nbytes}", len(buf))
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    return arr, pos + nbytes


def write_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as fh:
        data = fh.read()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise ParseError(f"{len(data) - end} trailing bytes after tensor payload", end)
    return arr


# --------------------------------------------------------------------------
# weight bundles


def encode_bundle(weights, cfg: SigmaConfig):
    tensors, blobs, offset = {}, [], 0
    for name, arr in named_arrays(weights):
        if name in tensors:
            raise ConfigError(f"duplicate weight name {name!r}")
        blob = encode_tensor(arr)
        tensors[name] = {"shape": list(arr.shape), "dtype": DTYPE_NAMES[CODE_OF[arr.dtype.name]], "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "tensors": tensors},
                          sort_keys=True).encode()
    return BUNDLE_MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(blobs)


def save_weights(path, weights, cfg: SigmaConfig):
    with open(path, "wb") as fh:
        fh.write(encode_bundle(weights, cfg))


def decode_bundle(data, cfg: SigmaConfig | None = None):
    """Parse a bundle and check every tensor against the config's weight template.

    Returns ``(weights, cfg)``. When ``cfg`` is given it must match the
    bundle's stored config hash.
    """
    if bytes(data[:4]) != BUNDLE_MAGIC:
        raise ParseError("bad weight bundle magic", 0)
    if len(data) < 8:
        raise ParseError("truncated bundle header", len(data))
    (mlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + mlen:
        raise ParseError("truncated bundle manifest", len(data))
    try:
        manifest = json.loads(bytes(data[8:8 + mlen]).decode())
        stored = SigmaConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"invalid bundle manifest: {exc}", 8) from None
    if stored.config_hash() != manifest.get("config_hash"):
        raise ConfigError("bundle config hash does not match its stored config")
    if cfg is not None and cfg.config_hash() != stored.config_hash():
        raise ConfigError("weight bundle was written for a different config")
    cfg = stored

    template = dict(named_arrays(init_weights(cfg)))
    missing, extra = set(template) - set(entries), set(entries) - set(template)
    if missing or extra:
        raise ConfigError(f"bundle names disagree with config: missing {sorted(missing)[:5]}, "
                          f"unexpected {sorted(extra)[:5]}")
    base = 8 + mlen
    arrays = {}
    for name, ref in template.items():
        entry = entries[name]
        if tuple(entry["shape"]) != ref.shape:
            raise ConfigError(f"{name}: bundle shape {tuple(entry['shape'])} != expected {ref.shape}")
        arr, _ = decode_tensor(data, base + int(entry["offset"]))
        if arr.shape != ref.shape or arr.dtype != ref.dtype:
            raise ConfigError(f"{name}: stored tensor {arr.shape}/{arr.dtype} != expected {ref.shape}/{ref.dtype}")
        arrays[name] = arr
    return replace_arrays(init_weights(cfg), arrays), cfg


def load_weights(path, cfg: SigmaConfig | None = None):
    with open(path, "rb") as fh:
        return decode_bundle(fh.read(), cfg)


# --------------------------------------------------------------------------
# configs


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.pos) from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return SigmaConfig.from_dict(data)


def save_config(path, cfg: SigmaConfig):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_config(value):
    """A preset name (``tiny``/``small``/``base``) or a path to a JSON config."""
    from .model import PRESETS

    if value.lower() in PRESETS and not os.path.exists(value):
        return SigmaConfig.preset(value)
    return load_config(value)


# --------------------------------------------------------------------------
# PPM images


def _ppm_token(data, pos):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PPM header", start)
    return data[start:pos], start, pos


def decode_ppm(data):
    """Binary P6 with maxval 255 -> float64 (H, W, 3) in [0, 1]."""
    magic, at, pos = _ppm_token(data, 0)
    if magic != b"P6":
        raise ParseError(f"expected P6 magic, got {magic[:8]!r}", at)
    fields = []
    for what in ("width", "height", "maxval"):
        tok, at, pos = _ppm_token(data, pos)
        if not tok.isdigit():
            raise ParseError(f"PPM {what} is not a number: {tok[:16]!r}", at)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError("PPM extents must be positive", at)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", at)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PPM header", pos)
    pos += 1
    need = width * height * 3
    if len(data) - pos < need:
        raise ParseError(f"PPM payload truncated: {len(data) - pos} of {need} bytes", len(data))
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    return pix.astype(np.float64) / 255.0


def read_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def encode_ppm(rgb8):
    rgb8 = np.asarray(rgb8)
    if rgb8.ndim != 3 or rgb8.shape[2] != 3 or rgb8.dtype != np.uint8:
        raise ConfigError(f"expected (H, W, 3) uint8 pixels, got {rgb8.shape} {rgb8.dtype}")
    return f"P6\n{rgb8.shape[1]} {rgb8.shape[0]}\n255\n".encode() + rgb8.tobytes()


def write_ppm(path, image):
    """Write a float image in [0, 1] (rounded to 8 bits) or a uint8 image."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def _bitspread_color(i):
    r = g = b = 0
    for shift in range(7, -1, -1):
        r |= ((i >> 0) & 1) << shift
        g |= ((i >> 1) & 1) << shift
        b |= ((i >> 2) & 1) << shift
        i >>= 3
    return r, g, b


def palette(num_classes):
    """(num_classes, 3) uint8 colours; the first nine are the MFNet class colours, all distinct."""
    if num_classes < 1 or num_classes > 256 ** 3:
        raise ConfigError(f"palette size must be in [1, 2^24], got {num_classes}")
    colors = list(MFNET_PALETTE[:num_classes])
    seen = set(colors)
    i = 0
    while len(colors) < num_classes:
        c = _bitspread_color(i)
        i += 1
        if c not in seen:
            seen.add(c)
            colors.append(c)
    return np.array(colors, dtype=np.uint8)


def colorize(labels, pal):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= len(pal)):
        raise ConfigError("label outside palette range")
    return pal[labels]


def write_label_ppm(seg, pal, path):
    """Colour-map a :class:`SegmentationMap` (or a raw label array) and write it as P6."""
    labels = getattr(seg, "labels", seg)
    write_ppm(path, colorize(labels, pal))


def labels_from_colors(rgb8, pal):
    key = lambda c: (c[..., 0].astype(np.int64) << 16) | (c[..., 1].astype(np.int64) << 8) | c[..., 2]
    pal_keys = key(np.asarray(pal))
    order = np.argsort(pal_keys)
    pix = key(np.asarray(rgb8))
    pos = np.clip(np.searchsorted(pal_keys[order], pix), 0, len(pal_keys) - 1)
    found = pal_keys[order][pos] == pix
    if not found.all():
        bad = np.argwhere(~found)[0]
        raise ParseError(f"pixel {tuple(int(v) for v in bad)} has a colour outside the palette")
    return order[pos]


def read_label_ppm(path, pal):
    with open(path, "rb") as fh:
        img = decode_ppm(fh.read())
    return labels_from_colors(np.rint(img * 255).astype(np.uint8), pal)


# --------------------------------------------------------------------------
# reports


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
