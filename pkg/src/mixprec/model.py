"""Network description and parameterized forward passes.

A model is an ordered list of :class:`LayerSpec` records - sequential,
with optional residual links (`add` layers reference the output of an
earlier layer). conv2d/fc layers own float weights, an optional float
bias (never quantized), and a PACT activation quantizer for their input.

Three forward modes:

* float        - no quantization anywhere (debugging / upper bound);
* fixed        - a concrete :class:`PrecisionAssignment` (warmup uses the
                 uniform 8-bit assignment, fine-tuning the searched one);
* search       - gated mixture of fake-quantized copies per GateState.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .gates import GateState, PrecisionAssignment, mixedprec_layer_forward
from .quantize import PactActQuantizer, weight_fakequant_mixed
from .tensor import Tensor

QUANT_KINDS = ("conv2d", "fc")
TRANSPARENT_KINDS = ("relu", "avgpool", "maxpool", "flatten")
LAYER_KINDS = QUANT_KINDS + TRANSPARENT_KINDS + ("add",)


@dataclass
class LayerSpec:
    """Geometry record for one layer; fc is a 1x1 conv for all cost formulas."""

    kind: str
    c_in: int = 0
    c_out: int = 0
    k_x: int = 1
    k_y: int = 1
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    window: int = 2
    residual_from: int = -1
    has_bias: bool = True
    searchable: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind: {self.kind!r}")
        if self.kind == "conv2d":
            if min(self.c_in, self.c_out, self.k_x, self.k_y, self.stride) <= 0:
                raise ConfigError(f"conv2d geometry must be positive: {self}")
            if self.padding < 0:
                raise ConfigError("conv2d padding must be >= 0")
        elif self.kind == "fc":
            if min(self.in_features, self.out_features) <= 0:
                raise ConfigError(f"fc geometry must be positive: {self}")
        elif self.kind in ("avgpool", "maxpool") and self.window <= 0:
            raise ConfigError("pool window must be positive")
        elif self.kind == "add" and self.residual_from < 0:
            raise ConfigError("add layer needs residual_from index")

    @property
    def is_quantized(self) -> bool:
        return self.kind in QUANT_KINDS

    @property
    def out_channels(self) -> int:
        return self.c_out if self.kind == "conv2d" else self.out_features

    @property
    def weight_volume(self) -> int:
        """Weights per output channel: C_in * K_x * K_y (fc: in_features)."""
        return self.c_in * self.k_x * self.k_y if self.kind == "conv2d" else self.in_features

    def weight_shape(self) -> tuple:
        if self.kind == "conv2d":
            return (self.c_out, self.c_in, self.k_y, self.k_x)
        return (self.out_features, self.in_features)


@dataclass
class LayerShape:
    """Inferred output shape (without batch) and MAC count of one layer."""

    out_shape: tuple
    macs: int = 0


class Network:
    """Parameter store + forward passes over a list of LayerSpec."""

    def __init__(self, layers: list[LayerSpec], input_shape: tuple,
                 seed: int = 0, clip_init: float | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.weights: dict[int, Tensor] = {}
        self.biases: dict[int, Tensor] = {}
        self.act_quant: dict[int, PactActQuantizer] = {}
        self.shapes: list[LayerShape] = []
        self._infer_shapes()
        rng = np.random.default_rng(seed)
        for i, spec in enumerate(self.layers):
            if not spec.is_quantized:
                continue
            fan_in = spec.weight_volume
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape())
            self.weights[i] = Tensor(w, requires_grad=True)
            if spec.has_bias:
                self.biases[i] = Tensor(np.zeros(spec.out_channels), requires_grad=True)
            self.act_quant[i] = (PactActQuantizer() if clip_init is None
                                 else PactActQuantizer(clip_init))

    # -- static structure ----------------------------------------------------

    def _infer_shapes(self):
        shape = self.input_shape
        feed: list[tuple] = []
        for i, spec in enumerate(self.layers):
            macs = 0
            if spec.kind == "conv2d":
                if len(shape) != 3 or shape[0] != spec.c_in:
                    raise ConfigError(
                        f"layer {i} (conv2d): expects {spec.c_in} channels, input is {shape}")
                c, h, w = shape
                oh = (h + 2 * spec.padding - spec.k_y) // spec.stride + 1
                ow = (w + 2 * spec.padding - spec.k_x) // spec.stride + 1
                if oh <= 0 or ow <= 0:
                    raise ConfigError(f"layer {i} (conv2d): empty output for input {shape}")
                shape = (spec.c_out, oh, ow)
                macs = spec.c_out * spec.weight_volume * oh * ow
            elif spec.kind == "fc":
                if len(shape) != 1 or shape[0] != spec.in_features:
                    raise ConfigError(
                        f"layer {i} (fc): expects {spec.in_features} features, input is {shape}")
                shape = (spec.out_features,)
                macs = spec.out_features * spec.in_features
            elif spec.kind in ("avgpool", "maxpool"):
                c, h, w = shape
                if h % spec.window or w % spec.window:
                    raise ConfigError(
                        f"layer {i} ({spec.kind}): window {spec.window} must divide {h}x{w}")
                shape = (c, h // spec.window, w // spec.window)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "add":
                if spec.residual_from >= i:
                    raise ConfigError(f"layer {i} (add): residual_from must point backwards")
                other = feed[spec.residual_from]
                if other != shape:
                    raise ConfigError(
                        f"layer {i} (add): operand shapes differ: {shape} vs {other}")
            feed.append(shape)
            self.shapes.append(LayerShape(shape, macs))

    def searchable_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.is_quantized and s.searchable]

    def layer_channels(self) -> dict[int, int]:
        return {i: self.layers[i].out_channels for i in self.searchable_indices()}

    def uniform_assignment(self, bits: int) -> PrecisionAssignment:
        idxs = self.searchable_indices()
        return PrecisionAssignment(
            act_bits={i: bits for i in idxs},
            weight_bits={i: np.full(self.layers[i].out_channels, bits, dtype=np.int64)
                         for i in idxs},
        )

    # -- parameters ------------------------------------------------------------

    def weight_params(self) -> list[Tensor]:
        params = []
        for i in sorted(self.weights):
            params.append(self.weights[i])
            if i in self.biases:
                params.append(self.biases[i])
        return params

    def clip_params(self) -> list[Tensor]:
        return [self.act_quant[i].clip for i in sorted(self.act_quant)]

    def project_clips(self):
        for q in self.act_quant.values():
            q.project()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i in sorted(self.weights):
            state[f"w{i}"] = self.weights[i].data.copy()
            if i in self.biases:
                state[f"b{i}"] = self.biases[i].data.copy()
            state[f"clip{i}"] = self.act_quant[i].clip.data.copy()
        return state

    def load_state(self, state: dict[str, np.ndarray]):
        for i in sorted(self.weights):
            self.weights[i].data = np.array(state[f"w{i}"], dtype=np.float64)
            if i in self.biases:
                self.biases[i].data = np.array(state[f"b{i}"], dtype=np.float64)
            self.act_quant[i].clip.data = np.array(state[f"clip{i}"], dtype=np.float64)

    # -- forward passes ----------------------------------------------------------

    def _run(self, x, layer_fn) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        outputs: list[Tensor] = []
        for i, spec in enumerate(self.layers):
            try:
                if spec.is_quantized:
                    h = layer_fn(i, spec, h)
                elif spec.kind == "relu":
                    h = T.relu(h)
                elif spec.kind == "avgpool":
                    h = T.avgpool2d(h, spec.window)
                elif spec.kind == "maxpool":
                    h = T.maxpool2d(h, spec.window)
                elif spec.kind == "flatten":
                    h = T.flatten(h)
                elif spec.kind == "add":
                    h = T.add(h, outputs[spec.residual_from])
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({spec.kind}): {exc}") from exc
            outputs.append(h)
        return h

    def forward_float(self, x) -> Tensor:
        def run_layer(i, spec, h):
            if spec.kind == "conv2d":
                return T.conv2d(h, self.weights[i], self.biases.get(i),
                                stride=spec.stride, padding=spec.padding)
            return T.linear(h, self.weights[i], self.biases.get(i))
        return self._run(x, run_layer)

    def forward_fixed(self, x, assignment: PrecisionAssignment,
                      default_bits: int = 8) -> Tensor:
        """Concrete per-layer activation bits and per-channel weight bits.

        Layers absent from the assignment (non-searchable ones) run at
        `default_bits` uniformly.
        """
        def run_layer(i, spec, h):
            act_bits = assignment.act_bits.get(i, default_bits)
            wbits = assignment.weight_bits.get(
                i, np.full(spec.out_channels, default_bits, dtype=np.int64))
            xq = self.act_quant[i](h, act_bits)
            wq = weight_fakequant_mixed(self.weights[i], wbits)
            if spec.kind == "conv2d":
                return T.conv2d(xq, wq, self.biases.get(i),
                                stride=spec.stride, padding=spec.padding)
            return T.linear(xq, wq, self.biases.get(i))
        return self._run(x, run_layer)

    def forward_search(self, x, gates: GateState, reg_mode: str = "size") -> Tensor:
        """Gated mixture forward; size mode pins activations to p_max."""
        act_override = gates.p_x.max if reg_mode == "size" else None
        def run_layer(i, spec, h):
            if not spec.searchable:
                xq = self.act_quant[i](h, gates.p_x.max)
                wq = weight_fakequant_mixed(
                    self.weights[i],
                    np.full(spec.out_channels, gates.p_w.max, dtype=np.int64))
                if spec.kind == "conv2d":
                    return T.conv2d(xq, wq, self.biases.get(i),
                                    stride=spec.stride, padding=spec.padding)
                return T.linear(xq, wq, self.biases.get(i))
            return mixedprec_layer_forward(
                spec.kind, h, self.weights[i], self.biases.get(i),
                gates.delta[i], gates.gamma[i], gates.tau, gates.p_x, gates.p_w,
                self.act_quant[i].clip, stride=spec.stride, padding=spec.padding,
                act_bits_override=act_override)
        return self._run(x, run_layer)
