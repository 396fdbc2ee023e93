"""Four-direction 2-D selective scan (SS2D)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .ssm import SelectiveSsmParams, init_ssm_params, selective_scan


class ScanDirection(enum.IntEnum):
    """Raster traversals of an H x W map.

    ROW_MAJOR runs top-left to bottom-right along rows, COL_MAJOR along
    columns; the reversed variants visit the same cells backwards.
    """

    ROW_MAJOR = 0
    COL_MAJOR = 1
    ROW_MAJOR_REVERSED = 2
    COL_MAJOR_REVERSED = 3

    @property
    def base(self):
        return ScanDirection(self.value % 2)

    @property
    def is_reversed(self):
        return self.value >= 2

    @property
    def mirror(self):
        return ScanDirection((self.value + 2) % 4)


DIRECTIONS = tuple(ScanDirection)


def flatten_direction(F, direction):
    """(H, W, C) map -> (H*W, C) sequence in the given traversal order."""
    F = np.asarray(F)
    if F.ndim != 3:
        raise DimensionError(f"flatten_direction: expected (H, W, C), got {F.shape}")
    H, W, C = F.shape
    direction = ScanDirection(direction)
    if direction.base is ScanDirection.ROW_MAJOR:
        seq = F.reshape(H * W, C)
    else:
        seq = F.transpose(1, 0, 2).reshape(H * W, C)
    if direction.is_reversed:
        seq = seq[::-1]
    return np.ascontiguousarray(seq)


def unflatten_direction(seq, direction, H, W):
    """Exact inverse of :func:`flatten_direction`."""
    seq = np.asarray(seq)
    if seq.ndim != 2 or seq.shape[0] != H * W:
        raise DimensionError(f"unflatten_direction: sequence {seq.shape} does not hold {H}x{W} positions")
    direction = ScanDirection(direction)
    if direction.is_reversed:
        seq = seq[::-1]
    C = seq.shape[1]
    if direction.base is ScanDirection.ROW_MAJOR:
        F = seq.reshape(H, W, C)
    else:
        F = seq.reshape(W, H, C).transpose(1, 0, 2)
    return np.ascontiguousarray(F)


@dataclass
class DirectionalParams:
    """One independent scan parameter set per direction, in ``DIRECTIONS`` order."""

    scans: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.scans) != len(DIRECTIONS):
            raise DimensionError(f"DirectionalParams needs {len(DIRECTIONS)} parameter sets, got {len(self.scans)}")
        D, N = self.scans[0].channels, self.scans[0].state_size
        for p in self.scans:
            p.validate()
            if (p.channels, p.state_size) != (D, N):
                raise DimensionError("all directional scans must share channels and state size")

    @property
    def channels(self):
        return self.scans[0].channels

    @property
    def state_size(self):
        return self.scans[0].state_size

    @classmethod
    def shared(cls, params: SelectiveSsmParams):
        return cls([params] * len(DIRECTIONS))


def init_directional_params(init, channels, state_size, model_dim=None):
    return DirectionalParams([
        init_ssm_params(init, channels, state_size, model_dim=model_dim) for _ in DIRECTIONS
    ])


def ss2d(F, params: DirectionalParams, method="taylor", chunk=None):
    """Scan the map along all four directions, map each back, and sum (d0+d1+d2+d3)."""
    F = np.asarray(F)
    if F.ndim != 3 or F.shape[2] != params.channels:
        raise DimensionError(f"ss2d: map {F.shape} does not have {params.channels} channels")
    H, W, _ = F.shape
    out = None
    for direction, p in zip(DIRECTIONS, params.scans):
        y = selective_scan(flatten_direction(F, direction), p, method=method, chunk=chunk)
        y = unflatten_direction(y, direction, H, W)
        out = y if out is None else out + y
    return out
