"""Slice-stack extraction and distance-weighted volumetric assembly.

Volumes are generated slice by slice: a 2D network sees each target slice
together with its neighbors as channels, and the per-slice predictions are
recombined into a volume by weighting each predicted neighbor by its
distance to the target position and averaging the overlaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dataio import Volume3D
from .errors import ConfigurationError, ContractViolation, DataError

DEFAULT_AXIS = 2  # axial


@dataclass
class SliceStack:
    """A target slice plus its neighbors along one axis.

    ``data`` has shape (N, H, W) where channel k holds the source slice at
    ``center_index + (k - K)`` with K = (N-1)//2; out-of-range neighbors are
    clamped to the boundary slice.
    """

    data: np.ndarray
    axis: int
    center_index: int

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]


def _check_odd(n: int) -> int:
    if n < 1 or n % 2 == 0:
        raise ConfigurationError(f"neighbor count must be odd and positive, got {n}")
    return n


def extract_stack(
    volume: Volume3D | np.ndarray, axis: int, index: int, n_slices: int
) -> SliceStack:
    """Extract the N-slice neighborhood centered at ``index`` along ``axis``."""
    data = np.asarray(getattr(volume, "data", volume))
    _check_odd(n_slices)
    if not 0 <= axis < data.ndim:
        raise ContractViolation(f"axis {axis} out of range for shape {data.shape}")
    length = data.shape[axis]
    if not 0 <= index < length:
        raise ContractViolation(f"slice index {index} out of range [0, {length})")
    k = (n_slices - 1) // 2
    positions = np.clip(np.arange(index - k, index + k + 1), 0, length - 1)
    stack = np.take(data, positions, axis=axis)
    stack = np.moveaxis(stack, axis, 0)
    return SliceStack(data=stack.astype(np.float32), axis=axis, center_index=index)


def extract_all_stacks(
    volume: Volume3D | np.ndarray, axis: int, n_slices: int
) -> list[SliceStack]:
    data = np.asarray(getattr(volume, "data", volume))
    return [
        extract_stack(data, axis, i, n_slices) for i in range(data.shape[axis])
    ]


def triangular_weights(k: int) -> np.ndarray:
    """w(d) = K+1-d for d = 0..K: linearly decreasing with distance."""
    return (k + 1 - np.arange(k + 1)).astype(np.float64)


def uniform_weights(k: int) -> np.ndarray:
    return np.ones(k + 1, dtype=np.float64)


def gaussian_weights(k: int) -> np.ndarray:
    """exp(-d^2 / (2 sigma^2)) with sigma = K/2 (uniform when K = 0)."""
    if k == 0:
        return np.ones(1, dtype=np.float64)
    sigma = k / 2.0
    d = np.arange(k + 1, dtype=np.float64)
    return np.exp(-(d**2) / (2.0 * sigma**2))

WEIGHT_FUNCTIONS: dict[str, Callable[[int], np.ndarray]] = {
    "triangular": triangular_weights,
    "uniform": uniform_weights,
    "gaussian": gaussian_weights,
}


def _resolve_weights(weight_fn, k: int) -> np.ndarray:
    if callable(weight_fn):
        w = np.asarray([weight_fn(d) for d in range(k + 1)], dtype=np.float64)
    else:
        try:
            w = WEIGHT_FUNCTIONS[weight_fn](k)
        except KeyError:
            raise ConfigurationError(
                f"unknown weight function {weight_fn!r}; choose from "
                f"{sorted(WEIGHT_FUNCTIONS)} or pass a callable"
            ) from None
    if np.any(w <= 0) or np.any(np.diff(w) > 0):
        raise ConfigurationError(
            "slice weights must be positive and non-increasing in distance"
        )
    return w


def assemble_volume(
    stacks: Sequence[SliceStack],
    weight_fn: str | Callable[[int], float] = "triangular",
    modality: str = "PET",
    length: int | None = None,
) -> Volume3D:
    """Recombine per-slice prediction stacks into a volume.

    Output slice s receives channel K + (s - c) of every stack centered at c
    with |s - c| <= K, weighted by w(|s - c|) and normalized by the summed
    weight at that position. ``length`` defaults to the largest center index
    plus one; missing or inconsistent stacks raise DataError. The reduction
    is deterministic and independent of stack order.
    """
    if not stacks:
        raise DataError("no stacks to assemble")
    axis = stacks[0].axis
    n = stacks[0].n_slices
    _check_odd(n)
    k = (n - 1) // 2
    slice_shape = stacks[0].data.shape[1:]
    if length is None:
        length = max(s.center_index for s in stacks) + 1

    by_center: dict[int, SliceStack] = {}
    for stack in stacks:
        if stack.axis != axis or stack.n_slices != n or stack.data.shape[1:] != slice_shape:
            raise DataError("stacks disagree on axis, neighbor count, or slice shape")
        if stack.center_index in by_center:
            raise DataError(f"duplicate stack for center index {stack.center_index}")
        by_center[stack.center_index] = stack
    missing = [i for i in range(length) if i not in by_center]
    if missing:
        raise DataError(f"incomplete coverage: missing stacks for centers {missing}")

    w = _resolve_weights(weight_fn, k)
    accum = np.zeros((length, *slice_shape), dtype=np.float64)
    wsum = np.zeros(length, dtype=np.float64)
    for c in range(length):
        data = by_center[c].data
        for ch in range(n):
            s = c + ch - k
            if 0 <= s < length:
                weight = w[abs(ch - k)]
                accum[s] += weight * data[ch]
                wsum[s] += weight
    accum /= wsum[(...,) + (np.newaxis,) * len(slice_shape)]
    out = np.moveaxis(accum, 0, axis)
    return Volume3D(out.astype(np.float32), modality)
