"""Differentiable bit-width selection gates.

Each searchable layer carries a logit vector `delta` over the activation
precision candidates and a logit matrix `gamma` with one row per output
channel over the weight precision candidates. Softmax with a shared,
annealed temperature turns logits into mixing coefficients; effective
tensors are convex combinations of fake-quantized copies, all derived
from the single underlying float tensor on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import PrecisionError
from .quantize import MAX_BITS, MIN_BITS, pact_act_fakequant, weight_fakequant_per_channel
from .tensor import Tensor

TAU_INIT = 5.0
ANNEAL_RATE = 0.0045


@dataclass(frozen=True)
class PrecisionSet:
    """Strictly increasing candidate bit-widths, each within [2, 8]."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise PrecisionError("precision set is empty")
        if any(b < MIN_BITS or b > MAX_BITS for b in bits):
            raise PrecisionError(f"precision set {bits} outside [{MIN_BITS}, {MAX_BITS}]")
        if any(b >= a for b, a in zip(bits, bits[1:])):
            raise PrecisionError(f"precision set {bits} must be strictly increasing")
        object.__setattr__(self, "bits", bits)

    def __iter__(self):
        return iter(self.bits)

    def __len__(self):
        return len(self.bits)

    def __getitem__(self, i):
        return self.bits[i]

    def index(self, b: int) -> int:
        return self.bits.index(b)

    @property
    def max(self) -> int:
        return self.bits[-1]


def softmax_temperature(v, tau: float):
    """Temperature softmax; Tensor in -> Tensor (graph), ndarray in -> ndarray."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(v, Tensor):
        return T.softmax(v, tau=tau, axis=-1)
    v = np.asarray(v, dtype=np.float64)
    z = (v - v.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def anneal(tau: float, rate: float = ANNEAL_RATE) -> float:
    """One annealing step: tau * exp(-rate)."""
    return tau * float(np.exp(-rate))


@dataclass
class PrecisionAssignment:
    """Discrete choice: activation bits per layer, weight bits per channel."""

    act_bits: dict[int, int]
    weight_bits: dict[int, np.ndarray]

    def channel_fraction_at(self, bits: int) -> float:
        total = sum(len(v) for v in self.weight_bits.values())
        hits = sum(int((v == bits).sum()) for v in self.weight_bits.values())
        return hits / total if total else 0.0

    def to_jsonable(self) -> dict:
        return {
            "act_bits": {str(k): int(v) for k, v in self.act_bits.items()},
            "weight_bits": {str(k): [int(b) for b in v] for k, v in self.weight_bits.items()},
        }

    @classmethod
    def from_jsonable(cls, obj: dict) -> "PrecisionAssignment":
        return cls(
            act_bits={int(k): int(v) for k, v in obj["act_bits"].items()},
            weight_bits={int(k): np.asarray(v, dtype=np.int64)
                         for k, v in obj["weight_bits"].items()},
        )


class GateState:
    """Trainable gate logits for every searchable layer plus the shared tau.

    `layer_channels` maps searchable layer index -> output channel count.
    With `tied=True` each gamma has a single row shared by all channels of
    the layer, which restricts the search space to layer-wise assignments.
    """

    def __init__(self, layer_channels: dict[int, int], p_x: PrecisionSet,
                 p_w: PrecisionSet, tau: float = TAU_INIT, tied: bool = False):
        self.p_x = p_x
        self.p_w = p_w
        self.tau = float(tau)
        self.tied = tied
        self.layer_channels = dict(layer_channels)
        self.delta: dict[int, Tensor] = {}
        self.gamma: dict[int, Tensor] = {}
        for idx, c_out in self.layer_channels.items():
            rows = 1 if tied else c_out
            self.delta[idx] = Tensor(np.zeros(len(p_x)), requires_grad=True)
            self.gamma[idx] = Tensor(np.zeros((rows, len(p_w))), requires_grad=True)

    def parameters(self, include_delta: bool = True) -> list[Tensor]:
        params = []
        if include_delta:
            params.extend(self.delta[i] for i in sorted(self.delta))
        params.extend(self.gamma[i] for i in sorted(self.gamma))
        return params

    def anneal(self, rate: float = ANNEAL_RATE):
        self.tau = anneal(self.tau, rate)

    def delta_hat(self, idx: int) -> Tensor:
        return softmax_temperature(self.delta[idx], self.tau)

    def gamma_hat(self, idx: int) -> Tensor:
        return softmax_temperature(self.gamma[idx], self.tau)

    def discretize(self) -> PrecisionAssignment:
        """Argmax per softmax row; exact ties resolve to the lowest bit-width."""
        act, wbits = {}, {}
        for idx in sorted(self.layer_channels):
            p_act = softmax_temperature(self.delta[idx].data, self.tau)
            act[idx] = self.p_x[int(np.argmax(p_act))]  # argmax picks first max
            p_w = softmax_temperature(self.gamma[idx].data, self.tau)
            picks = np.argmax(p_w, axis=1)
            if self.tied:
                picks = np.repeat(picks, self.layer_channels[idx])
            wbits[idx] = np.asarray([self.p_w[int(i)] for i in picks], dtype=np.int64)
        return PrecisionAssignment(act, wbits)

    def snapshot(self) -> dict[str, np.ndarray]:
        state = {"tau": np.asarray(self.tau)}
        for idx in self.layer_channels:
            state[f"delta{idx}"] = self.delta[idx].data.copy()
            state[f"gamma{idx}"] = self.gamma[idx].data.copy()
        return state


def effective_activations(x: Tensor, delta: Tensor, tau: float,
                          p_x: PrecisionSet, clip: Tensor) -> Tensor:
    """Softmax-weighted sum of the fake-quantized activation copies.

    Gradients flow into x (straight-through), into the clip, and into the
    delta logits.
    """
    copies = [pact_act_fakequant(x, clip, b) for b in p_x]
    mix = softmax_temperature(delta, tau)
    return T.blend(copies, mix)


def effective_weights(w: Tensor, gamma: Tensor, tau: float, p_w: PrecisionSet) -> Tensor:
    """Per-channel softmax-weighted stack of fake-quantized weight copies.

    Each gamma row gets an independent softmax; row i mixes the candidate
    quantizations of output channel i. A single-row gamma is broadcast
    across channels (tied / layer-wise mode).
    """
    copies = [weight_fakequant_per_channel(w, b) for b in p_w]
    mix = softmax_temperature(gamma, tau)
    return T.channel_blend(copies, mix)


def mixedprec_layer_forward(kind: str, x: Tensor, w: Tensor, bias: Tensor | None,
                            delta: Tensor, gamma: Tensor, tau: float,
                            p_x: PrecisionSet, p_w: PrecisionSet, clip: Tensor,
                            stride: int = 1, padding: int = 0,
                            act_bits_override: int | None = None) -> Tensor:
    """One searchable layer: blend activations and weights, then conv/fc.

    `act_bits_override` pins the activation precision (used in size mode,
    where the activation search is disabled and inputs stay at 8 bit).
    """
    if act_bits_override is not None:
        x_eff = pact_act_fakequant(x, clip, act_bits_override)
    else:
        x_eff = effective_activations(x, delta, tau, p_x, clip)
    w_eff = effective_weights(w, gamma, tau, p_w)
    if kind == "conv2d":
        return T.conv2d(x_eff, w_eff, bias, stride=stride, padding=padding)
    if kind == "fc":
        return T.linear(x_eff, w_eff, bias)
    raise ValueError(f"not a searchable layer kind: {kind}")
