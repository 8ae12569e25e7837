"""Affine fake quantization with straight-through-estimator gradients.

Two quantizer families are used throughout:

* activations: unsigned codes over [0, clip) with a learnable PACT-style
  clip per layer, shared across every candidate bit-width of that layer;
* weights: per-output-channel symmetric codes over [-r_i, +r_i], where
  r_i = max|W_i| is recomputed from the float weights on every forward
  pass (no learnable weight range, no gradient through the max).

Codes follow clamp(round((t - alpha) / eps), 0, 2^n - 1) with eps =
(beta - alpha) / (2^n - 1) and round half away from zero. Dequantization
is alpha + code * eps, except the saturated top code which returns beta
exactly (so values at or above the range saturate to the bound itself).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PrecisionError, ShapeError
from .tensor import Tensor, _result

MIN_BITS = 2
MAX_BITS = 8

CLIP_FLOOR = 1e-3  # PACT clip is projected to stay above this after each step
CLIP_INIT = 6.0


def check_bits(bits: int) -> int:
    if not MIN_BITS <= int(bits) <= MAX_BITS:
        raise PrecisionError(f"unsupported precision: {bits} bits (need {MIN_BITS}..{MAX_BITS})")
    return int(bits)


def round_half_away(y: np.ndarray) -> np.ndarray:
    return np.where(y >= 0.0, np.floor(y + 0.5), np.ceil(y - 0.5))


@dataclass(frozen=True)
class AffineQuantParams:
    """Bit-width and value range of one affine quantizer."""

    bits: int
    alpha: float
    beta: float
    eps: float = field(init=False)

    def __post_init__(self):
        check_bits(self.bits)
        if not self.beta > self.alpha:
            raise ValueError(f"quant range invalid: [{self.alpha}, {self.beta})")
        object.__setattr__(self, "eps", (self.beta - self.alpha) / (2 ** self.bits - 1))

    @property
    def n_codes(self) -> int:
        return 2 ** self.bits


def affine_quantize(t: np.ndarray, q: AffineQuantParams) -> np.ndarray:
    """Map floats to integer codes in [0, 2^n - 1]."""
    y = (np.asarray(t) - q.alpha) / q.eps
    codes = np.clip(round_half_away(y), 0, q.n_codes - 1)
    return codes.astype(np.int64)


def dequantize(codes: np.ndarray, q: AffineQuantParams) -> np.ndarray:
    top = q.n_codes - 1
    vals = q.alpha + codes * q.eps
    return np.where(codes == top, q.beta, vals)


def fake_quantize(t: np.ndarray, q: AffineQuantParams) -> np.ndarray:
    """Quantize-then-dequantize in the float domain."""
    return dequantize(affine_quantize(t, q), q)


# -- straight-through autograd nodes -------------------------------------------


def pact_act_fakequant(x: Tensor, clip: Tensor, bits: int) -> Tensor:
    """Unsigned fake quantization of activations over [0, clip).

    Backward (straight-through): d out / d x = 1 for 0 <= x < clip else 0;
    d out / d clip = 1 where x >= clip, summed over elements.
    """
    check_bits(bits)
    clip_val = float(clip.data)
    if clip_val <= 0:
        raise ValueError(f"PACT clip must be positive, got {clip_val}")
    q = AffineQuantParams(bits, 0.0, clip_val)
    out = _result(fake_quantize(x.data, q), (x, clip))
    if out.requires_grad:
        inside = (x.data >= 0.0) & (x.data < clip_val)
        above = x.data >= clip_val
        def _bw(g):
            if x.requires_grad:
                x.accumulate_grad(g * inside)
            if clip.requires_grad:
                clip.accumulate_grad(np.asarray(g[above].sum()).reshape(clip.data.shape))
        out._backward = _bw
    return out


def channel_ranges(w: np.ndarray) -> np.ndarray:
    """Per-output-channel max-abs over all remaining axes."""
    reduce_axes = tuple(range(1, w.ndim))
    return np.abs(w).max(axis=reduce_axes) if reduce_axes else np.abs(w)


def _fakequant_symmetric(w: np.ndarray, ranges: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric per-channel fake quantization; zero-range channels map to 0."""
    shape = (-1,) + (1,) * (w.ndim - 1)
    r = ranges.reshape(shape)
    denom = 2 ** bits - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = 2.0 * r / denom
        codes = np.clip(round_half_away((w + r) / eps), 0, denom)
        vals = codes * eps - r
        vals = np.where(codes == denom, r, vals)
    return np.where(r > 0, vals, 0.0)


def weight_fakequant_per_channel(w: Tensor, bits: int) -> Tensor:
    """Fake-quantize each output-channel slice with its own symmetric range.

    The range r_i is treated as a constant; the straight-through backward
    is the identity inside [-r_i, r_i] (which, with recomputed ranges,
    covers every element).
    """
    check_bits(bits)
    if w.data.ndim < 1:
        raise ShapeError("per-channel quantization needs at least 1 axis")
    ranges = channel_ranges(w.data)
    out = _result(_fakequant_symmetric(w.data, ranges, bits), (w,))
    if out.requires_grad:
        shape = (-1,) + (1,) * (w.data.ndim - 1)
        mask = np.abs(w.data) <= ranges.reshape(shape)
        out._backward = lambda g: w.accumulate_grad(g * mask)
    return out


def weight_fakequant_mixed(w: Tensor, bits_per_channel: np.ndarray) -> Tensor:
    """Per-channel fake quantization where each channel has its own bit-width."""
    bits_per_channel = np.asarray(bits_per_channel)
    if bits_per_channel.shape != (w.data.shape[0],):
        raise ShapeError(
            f"need one bit-width per output channel, got {bits_per_channel.shape} "
            f"for {w.data.shape[0]} channels")
    ranges = channel_ranges(w.data)
    vals = np.empty_like(w.data)
    for bits in np.unique(bits_per_channel):
        check_bits(int(bits))
        sel = bits_per_channel == bits
        vals[sel] = _fakequant_symmetric(w.data[sel], ranges[sel], int(bits))
    out = _result(vals, (w,))
    if out.requires_grad:
        shape = (-1,) + (1,) * (w.data.ndim - 1)
        mask = np.abs(w.data) <= ranges.reshape(shape)
        out._backward = lambda g: w.accumulate_grad(g * mask)
    return out


class PactActQuantizer:
    """Learnable activation clip shared across all candidate precisions."""

    def __init__(self, init: float = CLIP_INIT):
        self.clip = Tensor(np.asarray(float(init)), requires_grad=True)

    def __call__(self, x: Tensor, bits: int) -> Tensor:
        return pact_act_fakequant(x, self.clip, bits)

    def project(self):
        """Keep the clip strictly positive after an optimizer step."""
        self.clip.data = np.maximum(self.clip.data, CLIP_FLOOR)

    @property
    def value(self) -> float:
        return float(self.clip.data)


class ChannelWeightQuantizer:
    """Stateless symmetric per-channel weight quantizer (ranges from data)."""

    def __call__(self, w: Tensor, bits: int) -> Tensor:
        return weight_fakequant_per_channel(w, bits)

    @staticmethod
    def ranges(w: Tensor | np.ndarray) -> np.ndarray:
        data = w.data if isinstance(w, Tensor) else np.asarray(w)
        return channel_ranges(data)
