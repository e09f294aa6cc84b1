"""Standard and deformable TDNN layers.

Both layers use "same" zero padding: output frame ``i`` is centred on input
frame ``i * stride`` and there are ``ceil(T / stride)`` output frames.  The
deformable layer adds a per-tap, per-frame fractional offset (shared by all
input channels) to every sampling position and reads the input by linear
interpolation.  Offsets come from a small convolution over the same input.

All functions accept a single sequence ``(C, T)`` or a batch ``(B, C, T)``;
offset fields are correspondingly ``(N, T_out)`` or ``(B, N, T_out)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import UsageError, as_batch, linear_sample, linear_sample_dpos, linear_sample_dx

DEFAULT_OFFSET_KERNEL = 5


class ClipMode(str, enum.Enum):
    NONE = "none"
    LATENCY = "latency_controlled"

    @classmethod
    def parse(cls, value) -> "ClipMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise UsageError(f"unknown clip mode {value!r}; expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class GridSpec:
    kernel_size: int
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise UsageError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.dilation < 1:
            raise UsageError(f"dilation must be >= 1, got {self.dilation}")
        if self.stride < 1:
            raise UsageError(f"stride must be >= 1, got {self.stride}")

    @property
    def taps(self) -> np.ndarray:
        """Relative sampling positions, symmetric around zero."""
        half = (self.kernel_size - 1) // 2
        return self.dilation * (np.arange(self.kernel_size) - half)

    @property
    def reach(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2

    def out_length(self, T: int) -> int:
        return -(-T // self.stride)

    def centers(self, T: int) -> np.ndarray:
        return np.arange(self.out_length(T)) * self.stride


@dataclass
class ConvParams:
    weight: np.ndarray  # (C_out, C_in, N)
    bias: np.ndarray  # (C_out,)

    @classmethod
    def zeros(cls, c_out: int, c_in: int, kernel_size: int) -> "ConvParams":
        return cls(np.zeros((c_out, c_in, kernel_size)), np.zeros(c_out))

    @classmethod
    def uniform(cls, c_out: int, c_in: int, kernel_size: int, rng: np.random.Generator) -> "ConvParams":
        # weights ~ U(-a, a), a = sqrt(1 / fan_in); bias starts at zero
        a = math.sqrt(1.0 / (c_in * kernel_size))
        return cls(rng.uniform(-a, a, size=(c_out, c_in, kernel_size)), np.zeros(c_out))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.weight.shape

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), self.bias.copy())


def _check_params(x: np.ndarray, p: ConvParams, g: GridSpec) -> None:
    c_out, c_in, n = p.weight.shape
    if n != g.kernel_size:
        raise UsageError(f"weight has {n} taps but grid has kernel_size {g.kernel_size}")
    if p.bias.shape != (c_out,):
        raise UsageError(f"bias shape {p.bias.shape} does not match C_out={c_out}")
    if x.shape[1] != c_in:
        raise UsageError(f"input has {x.shape[1]} channels, weights expect {c_in}")


def _contract(xs: np.ndarray, p: ConvParams) -> np.ndarray:
    # xs (B, C_in, N, T_out) -> (B, C_out, T_out)
    # one memory layout for every caller, so fixed and zero-offset grids round identically
    y = np.tensordot(np.ascontiguousarray(xs), p.weight, axes=([1, 2], [1, 2]))  # (B, T_out, C_out)
    return np.ascontiguousarray(y.transpose(0, 2, 1)) + p.bias[None, :, None]


def _contract_backward(xs: np.ndarray, p: ConvParams, gy: np.ndarray) -> tuple[np.ndarray, ConvParams]:
    gw = np.tensordot(gy, xs, axes=([0, 2], [0, 3]))  # (C_out, C_in, N)
    gb = gy.sum(axis=(0, 2))
    gxs = np.tensordot(gy, p.weight, axes=([1], [0]))  # (B, T_out, C_in, N)
    return gxs.transpose(0, 2, 3, 1), ConvParams(gw, gb)


def _grid_positions(T: int, g: GridSpec) -> np.ndarray:
    return g.centers(T)[None, :] + g.taps[:, None]  # (N, T_out)


def _gather_grid(x: np.ndarray, pos: np.ndarray) -> np.ndarray:
    T = x.shape[-1]
    valid = (pos >= 0) & (pos < T)
    vals = x[:, :, np.clip(pos, 0, T - 1)]  # (B, C, N, T_out)
    return np.where(valid, vals, 0.0)


def tdnn_forward(x, p: ConvParams, g: GridSpec) -> np.ndarray:
    """Fixed-grid 1-D convolution with "same" zero padding."""
    xb, single = as_batch(x)
    _check_params(xb, p, g)
    y = _contract(_gather_grid(xb, _grid_positions(xb.shape[-1], g)), p)
    return y[0] if single else y


def tdnn_backward(x, p: ConvParams, g: GridSpec, grad_y) -> tuple[np.ndarray, ConvParams]:
    """Gradients of ``sum(grad_y * tdnn_forward(x, p, g))``."""
    xb, single = as_batch(x)
    gy, _ = as_batch(grad_y, "grad_y")
    _check_params(xb, p, g)
    T = xb.shape[-1]
    expected = (xb.shape[0], p.weight.shape[0], g.out_length(T))
    if gy.shape != expected:
        raise UsageError(f"grad_y has shape {gy.shape}, expected {expected}")
    pos = _grid_positions(T, g)
    gxs, gp = _contract_backward(_gather_grid(xb, pos), p, gy)
    gx = np.zeros_like(xb)
    for n in range(g.kernel_size):
        # positions within one tap are distinct, so plain fancy-index add is safe
        valid = (pos[n] >= 0) & (pos[n] < T)
        gx[:, :, pos[n][valid]] += gxs[:, :, n, valid]
    return (gx[0] if single else gx), gp


@dataclass
class OffsetPredictor:
    """Convolution producing one offset per kernel tap per output frame.

    Dilation is always 1; the stride follows the main layer so offsets line
    up with output frames.  Fresh predictors are all zeros.
    """

    params: ConvParams
    kernel_size: int = DEFAULT_OFFSET_KERNEL

    @classmethod
    def zeros(cls, taps: int, c_in: int, kernel_size: int = DEFAULT_OFFSET_KERNEL) -> "OffsetPredictor":
        return cls(ConvParams.zeros(taps, c_in, kernel_size), kernel_size)

    def grid(self, main: GridSpec) -> GridSpec:
        return GridSpec(self.kernel_size, 1, main.stride)

    @property
    def size(self) -> int:
        return self.params.size


def offset_predict(x, op: OffsetPredictor, g: GridSpec) -> np.ndarray:
    if op.params.weight.shape[0] != g.kernel_size:
        raise UsageError(
            f"predictor emits {op.params.weight.shape[0]} offsets per frame, layer has {g.kernel_size} taps"
        )
    return tdnn_forward(x, op.params, op.grid(g))


def clip_offsets(f, mode=ClipMode.NONE) -> np.ndarray:
    """Latency control: with ``latency_controlled`` positive offsets become 0."""
    mode = ClipMode.parse(mode)
    f = np.asarray(f, dtype=np.float64)
    if mode is ClipMode.NONE:
        return f
    return np.minimum(f, 0.0)


def clip_offsets_backward(f, grad, mode=ClipMode.NONE) -> np.ndarray:
    # subgradient of min(f, 0) is 1 at f == 0
    mode = ClipMode.parse(mode)
    if mode is ClipMode.NONE:
        return np.asarray(grad, dtype=np.float64)
    return np.where(np.asarray(f) <= 0.0, grad, 0.0)


def _check_offsets(xb: np.ndarray, f: np.ndarray, g: GridSpec) -> np.ndarray:
    fb = f[None] if f.ndim == 2 else f
    expected = (xb.shape[0], g.kernel_size, g.out_length(xb.shape[-1]))
    if fb.shape != expected:
        raise UsageError(f"offset field has shape {f.shape}, expected {expected[1:]} per sequence")
    return fb


def _deform_positions(T: int, g: GridSpec, fb: np.ndarray) -> np.ndarray:
    return _grid_positions(T, g)[None] + fb  # (B, N, T_out)


def deformable_forward(x, p: ConvParams, g: GridSpec, f) -> np.ndarray:
    """Convolution whose tap ``n`` at output ``i`` reads ``x`` at ``i*s + R[n] + f[n, i]``."""
    xb, single = as_batch(x)
    _check_params(xb, p, g)
    fb = _check_offsets(xb, np.asarray(f, dtype=np.float64), g)
    B, N, T_out = fb.shape
    pos = _deform_positions(xb.shape[-1], g, fb).reshape(B, N * T_out)
    xs, _ = linear_sample(xb, pos)
    y = _contract(xs.reshape(B, xb.shape[1], N, T_out), p)
    return y[0] if single else y


def deformable_backward(x, p: ConvParams, g: GridSpec, f, grad_y) -> tuple[np.ndarray, ConvParams, np.ndarray]:
    """Gradients with respect to input, parameters and offsets."""
    xb, single = as_batch(x)
    gy, _ = as_batch(grad_y, "grad_y")
    _check_params(xb, p, g)
    fb = _check_offsets(xb, np.asarray(f, dtype=np.float64), g)
    B, N, T_out = fb.shape
    C = xb.shape[1]
    if gy.shape != (B, p.weight.shape[0], T_out):
        raise UsageError(f"grad_y has shape {gy.shape}, expected {(B, p.weight.shape[0], T_out)}")
    pos = _deform_positions(xb.shape[-1], g, fb).reshape(B, N * T_out)
    xs, coeffs = linear_sample(xb, pos)
    gxs, gp = _contract_backward(xs.reshape(B, C, N, T_out), p, gy)
    gxs = gxs.reshape(B, C, N * T_out)
    gf = linear_sample_dpos(xb, coeffs, gxs).reshape(B, N, T_out)
    gx = linear_sample_dx(xb.shape, coeffs, gxs)
    if single:
        return gx[0], gp, gf[0]
    return gx, gp, gf


@dataclass
class TDNNLayer:
    params: ConvParams
    grid: GridSpec

    kind = "standard"

    def forward(self, x, clip_mode=None):
        """Returns ``(y, cache)``; ``clip_mode`` is accepted for interface symmetry."""
        xb, _ = as_batch(x)
        return tdnn_forward(xb, self.params, self.grid), {"x": xb}

    def backward(self, cache, grad_y):
        gx, gp = tdnn_backward(cache["x"], self.params, self.grid, grad_y)
        return gx, {"weight": gp.weight, "bias": gp.bias}

    def named_params(self) -> dict[str, np.ndarray]:
        return {"weight": self.params.weight, "bias": self.params.bias}


@dataclass
class DeformableTDNNLayer:
    """Offset prediction, optional clamp and clip, then deformable convolution.

    ``max_offset`` (if set) clamps predicted offsets to ``[-max_offset,
    max_offset]`` before latency clipping.
    """

    params: ConvParams
    grid: GridSpec
    predictor: OffsetPredictor
    clip_mode: ClipMode = ClipMode.NONE
    max_offset: float | None = None

    kind = "deformable"

    def __post_init__(self):
        self.clip_mode = ClipMode.parse(self.clip_mode)

    def offsets(self, x, clip_mode=None):
        """Predicted, clamped and clipped offsets plus the raw prediction."""
        mode = self.clip_mode if clip_mode is None else ClipMode.parse(clip_mode)
        raw = offset_predict(x, self.predictor, self.grid)
        clamped = raw if self.max_offset is None else np.clip(raw, -self.max_offset, self.max_offset)
        return clip_offsets(clamped, mode), raw, mode

    def forward(self, x, clip_mode=None):
        xb, _ = as_batch(x)
        f_used, raw, mode = self.offsets(xb, clip_mode)
        y = deformable_forward(xb, self.params, self.grid, f_used)
        return y, {"x": xb, "raw": raw, "f": f_used, "mode": mode}

    def backward(self, cache, grad_y):
        xb, raw, f_used, mode = cache["x"], cache["raw"], cache["f"], cache["mode"]
        gx, gp, gf = deformable_backward(xb, self.params, self.grid, f_used, grad_y)
        clamped = raw if self.max_offset is None else np.clip(raw, -self.max_offset, self.max_offset)
        g_raw = clip_offsets_backward(clamped, gf, mode)
        if self.max_offset is not None:
            g_raw = np.where(np.abs(raw) <= self.max_offset, g_raw, 0.0)
        gx_pred, gpp = tdnn_backward(xb, self.predictor.params, self.predictor.grid(self.grid), g_raw)
        grads = {
            "weight": gp.weight,
            "bias": gp.bias,
            "offset.weight": gpp.weight,
            "offset.bias": gpp.bias,
        }
        return gx + gx_pred, grads

    def named_params(self) -> dict[str, np.ndarray]:
        return {
            "weight": self.params.weight,
            "bias": self.params.bias,
            "offset.weight": self.predictor.params.weight,
            "offset.bias": self.predictor.params.bias,
        }


def deformable_layer_apply(x, layer: DeformableTDNNLayer, clip_mode=None) -> tuple[np.ndarray, np.ndarray]:
    """Predict offsets, clip them, convolve; returns ``(y, offsets_used)``."""
    xb, single = as_batch(x)
    y, cache = layer.forward(xb, clip_mode)
    if single:
        return y[0], cache["f"][0]
    return y, cache["f"]


@dataclass(frozen=True)
class ParamCount:
    main: int
    offset: int = 0

    @property
    def total(self) -> int:
        return self.main + self.offset


def param_count(c_in: int, c_out: int, kernel_size: int, deformable: bool = False,
                offset_kernel: int = DEFAULT_OFFSET_KERNEL) -> ParamCount:
    """Weights plus biases; the predictor adds ``N * C_in * N' + N``."""
    main = c_out * c_in * kernel_size + c_out
    offset = kernel_size * c_in * offset_kernel + kernel_size if deformable else 0
    return ParamCount(main, offset)
