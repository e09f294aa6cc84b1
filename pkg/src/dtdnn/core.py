"""Feature-sequence helpers, seeded RNG and fractional-position sampling.

A feature sequence is a float64 array of shape ``(C, T)`` (channels by
frames).  Batched code paths use ``(B, C, T)``.  Reads outside ``[0, T-1]``
return zero.
"""

from __future__ import annotations

import math
import struct
from typing import NamedTuple

import numpy as np


class UsageError(ValueError):
    """Bad arguments: wrong shapes, out-of-range indices, non-finite inputs."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator; the stream depends only on ``seed``."""
    if seed < 0 or seed >= 2**64:
        raise UsageError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_features(x, name: str = "x") -> np.ndarray:
    """Validate and convert ``x`` to a finite float64 ``(C, T)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise UsageError(f"{name} must have shape (C, T) with C, T >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UsageError(f"{name} contains non-finite values")
    return arr


def as_batch(x, name: str = "x") -> tuple[np.ndarray, bool]:
    """Promote ``(C, T)`` to ``(1, C, T)``; returns the array and whether it was promoted."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise UsageError(f"{name} must be (C, T) or (B, C, T), got shape {arr.shape}")
    return arr, False


def _check_channel(x: np.ndarray, c: int) -> None:
    if not 0 <= c < x.shape[0]:
        raise UsageError(f"channel {c} out of range for {x.shape[0]} channels")


def read_padded(x, c: int, k: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    _check_channel(x, c)
    if 0 <= k < x.shape[1]:
        return float(x[c, k])
    return 0.0


def interpolate(x, c: int, t: float) -> float:
    """Linearly interpolate channel ``c`` of ``x`` at fractional frame ``t``."""
    if not math.isfinite(t):
        raise UsageError(f"sample position must be finite, got {t}")
    k = math.floor(t)
    frac = t - k
    return read_padded(x, c, k) * (k + 1 - t) + read_padded(x, c, k + 1) * frac


def interpolate_grad(x, c: int, t: float) -> tuple[float, float, float]:
    """Return ``(w_lo, w_hi, d_dt)`` for the sample at ``t``.

    ``w_lo`` and ``w_hi`` are the weights on frames ``floor(t)`` and
    ``floor(t) + 1``.  At integer ``t`` the derivative is taken from the
    right, i.e. ``x[t + 1] - x[t]``.
    """
    if not math.isfinite(t):
        raise UsageError(f"sample position must be finite, got {t}")
    k = math.floor(t)
    x_lo = read_padded(x, c, k)
    x_hi = read_padded(x, c, k + 1)
    return float(k + 1 - t), float(t - k), x_hi - x_lo


class SampleCoeffs(NamedTuple):
    """Interpolation bookkeeping for a batch of sample positions."""

    lo: np.ndarray  # (B, M) int, floor of the position
    w_lo: np.ndarray  # (B, M)
    w_hi: np.ndarray  # (B, M)
    valid_lo: np.ndarray  # (B, M) bool, lo inside [0, T)
    valid_hi: np.ndarray  # (B, M) bool, lo + 1 inside [0, T)


def _gather(x: np.ndarray, idx: np.ndarray, valid: np.ndarray) -> np.ndarray:
    # x (B, C, T), idx/valid (B, M) -> (B, C, M) with zeros where invalid
    safe = np.clip(idx, 0, x.shape[-1] - 1)
    vals = np.take_along_axis(x, safe[:, None, :], axis=2)
    return np.where(valid[:, None, :], vals, 0.0)


def linear_sample(x: np.ndarray, pos: np.ndarray) -> tuple[np.ndarray, SampleCoeffs]:
    """Batched interpolation: ``x`` is ``(B, C, T)``, ``pos`` is ``(B, M)``.

    Returns values of shape ``(B, C, M)``; every channel of a batch item is
    sampled at the same positions.
    """
    if not np.all(np.isfinite(pos)):
        raise UsageError("sample positions must be finite")
    T = x.shape[-1]
    lo_f = np.floor(pos)
    lo = lo_f.astype(np.int64)
    w_hi = pos - lo_f
    w_lo = 1.0 - w_hi
    valid_lo = (lo >= 0) & (lo < T)
    valid_hi = (lo + 1 >= 0) & (lo + 1 < T)
    coeffs = SampleCoeffs(lo, w_lo, w_hi, valid_lo, valid_hi)
    x_lo = _gather(x, lo, valid_lo)
    x_hi = _gather(x, lo + 1, valid_hi)
    return x_lo * w_lo[:, None, :] + x_hi * w_hi[:, None, :], coeffs


def linear_sample_dpos(x: np.ndarray, coeffs: SampleCoeffs, grad_vals: np.ndarray) -> np.ndarray:
    """Gradient with respect to the positions, summed over channels: ``(B, M)``."""
    x_lo = _gather(x, coeffs.lo, coeffs.valid_lo)
    x_hi = _gather(x, coeffs.lo + 1, coeffs.valid_hi)
    return np.sum(grad_vals * (x_hi - x_lo), axis=1)


def linear_sample_dx(x_shape: tuple[int, int, int], coeffs: SampleCoeffs, grad_vals: np.ndarray) -> np.ndarray:
    """Scatter ``grad_vals`` ``(B, C, M)`` back onto the integer frames of ``x``."""
    B, C, T = x_shape
    M = coeffs.lo.shape[1]
    base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * T  # (B, C, 1)
    out = np.zeros(B * C * T)
    for idx, w, valid in (
        (coeffs.lo, coeffs.w_lo, coeffs.valid_lo),
        (coeffs.lo + 1, coeffs.w_hi, coeffs.valid_hi),
    ):
        lin = np.broadcast_to(base + np.clip(idx, 0, T - 1)[:, None, :], (B, C, M))
        contrib = grad_vals * np.where(valid, w, 0.0)[:, None, :]
        out += np.bincount(lin.ravel(), weights=contrib.ravel(), minlength=B * C * T)
    return out.reshape(B, C, T)


# -- FSEQ feature files --------------------------------------------------------
# magic "FSEQ", C and T as little-endian u32, then C*T little-endian float64 (row = channel)

FSEQ_MAGIC = b"FSEQ"


def write_fseq(path, x) -> None:
    x = as_features(x)
    C, T = x.shape
    with open(path, "wb") as fh:
        fh.write(FSEQ_MAGIC)
        fh.write(struct.pack("<II", C, T))
        fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())


def read_fseq(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != FSEQ_MAGIC:
        raise UsageError(f"{path}: not an FSEQ feature file")
    C, T = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 8 * C * T:
        raise UsageError(f"{path}: expected {C}x{T} values, file has {(len(data) - 12) / 8:g}")
    return np.frombuffer(data, dtype="<f8", offset=12).reshape(C, T).astype(np.float64)
