"""Differentiable cost models and exact post-discretization accounting.

The size regularizer is the effective number of weight bits of a layer
(each softmax coefficient weighted by its bit-width); the energy
regularizer is the layer MAC count times the expected energy per MAC
under a hardware lookup table. Both are smooth in the gate coefficients.

Note on normalization: the energy bracket averages the per-channel LUT
cost over output channels (divide by C_out), so it is a true expected
energy *per operation*; multiplying by the precision-independent MAC
count Omega then yields the layer energy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .gates import GateState, PrecisionAssignment, PrecisionSet
from .model import LayerSpec, Network
from .tensor import Tensor, _result

PJ_PER_UJ = 1e6


@dataclass
class CostLUT:
    """Energy per MAC (picojoules) for every (act bits, weight bits) pair."""

    table: dict[tuple[int, int], float]
    hardware: str = ""
    clock_mhz: float = 0.0

    def __post_init__(self):
        for key, val in self.table.items():
            if val <= 0:
                raise ConfigError(f"LUT entry {key} must be positive, got {val}")

    def __call__(self, p_x: int, p_w: int) -> float:
        try:
            return self.table[(int(p_x), int(p_w))]
        except KeyError:
            raise ConfigError(f"LUT has no entry for (px={p_x}, pw={p_w})") from None

    def matrix(self, p_x: PrecisionSet, p_w: PrecisionSet) -> np.ndarray:
        """Dense [|P_X|, |P_W|] view; raises if any pair is missing."""
        return np.array([[self(a, w) for w in p_w] for a in p_x])

    def validate_cover(self, p_x: PrecisionSet, p_w: PrecisionSet):
        self.matrix(p_x, p_w)

    @classmethod
    def from_csv(cls, path) -> "CostLUT":
        """Load `px,pw,pj_per_mac` rows; `# key: value` lines carry metadata."""
        table: dict[tuple[int, int], float] = {}
        meta = {"hardware": "", "clock_mhz": 0.0}
        with open(path, newline="", encoding="utf-8") as fh:
            rows = []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    body = line.lstrip("#").strip()
                    if ":" in body:
                        key, val = body.split(":", 1)
                        key = key.strip().lower()
                        if key == "hardware":
                            meta["hardware"] = val.strip()
                        elif key in ("clock_mhz", "clock"):
                            meta["clock_mhz"] = float(val)
                    continue
                rows.append(line)
        reader = csv.DictReader(rows)
        if reader.fieldnames != ["px", "pw", "pj_per_mac"]:
            raise ConfigError(
                f"LUT header must be px,pw,pj_per_mac; got {reader.fieldnames}")
        for rec in reader:
            try:
                key = (int(rec["px"]), int(rec["pw"]))
                val = float(rec["pj_per_mac"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad LUT row {rec}: {exc}") from exc
            if key in table:
                raise ConfigError(f"duplicate LUT entry for {key}")
            table[key] = val
        if not table:
            raise ConfigError("LUT file holds no entries")
        return cls(table, hardware=meta["hardware"], clock_mhz=meta["clock_mhz"])

    @classmethod
    def illustrative(cls, p_x: PrecisionSet, p_w: PrecisionSet) -> "CostLUT":
        """Monotone placeholder values with C(8,8) pinned to 1.0 pJ.

        Shipped for demos and tests only; carries no measured provenance.
        """
        table = {(a, w): 0.2 + 0.8 * (a / 8.0) * (w / 8.0) for a in p_x for w in p_w}
        return cls(table, hardware="illustrative", clock_mhz=0.0)


@dataclass
class LayerCostContext:
    """Precision-independent cost constants of one layer."""

    omega: int           # total MACs for one inference
    weight_volume: int   # weights per output channel: C_in*K_x*K_y
    c_out: int

    @classmethod
    def of(cls, net: Network, idx: int) -> "LayerCostContext":
        spec = net.layers[idx]
        return cls(omega=net.shapes[idx].macs, weight_volume=spec.weight_volume,
                   c_out=spec.out_channels)


def _rows_and_factor(gamma_hat: Tensor, c_out: int) -> tuple[int, float]:
    rows = gamma_hat.data.shape[0]
    if rows not in (1, c_out):
        raise ConfigError(f"gamma has {rows} rows for a {c_out}-channel layer")
    return rows, (c_out / rows)


def size_reg(ctx: LayerCostContext, gamma_hat: Tensor, p_w: PrecisionSet) -> Tensor:
    """Effective weight bits of the layer: V * sum_i sum_p gamma[i,p] * p."""
    _, factor = _rows_and_factor(gamma_hat, ctx.c_out)
    bits = np.asarray(p_w.bits, dtype=np.float64)
    counts = gamma_hat.data.sum(axis=0) * factor
    val = ctx.weight_volume * np.dot(counts, bits)
    out = _result(np.asarray(val), (gamma_hat,))
    if out.requires_grad:
        def _bw(g):
            gg = float(g) * ctx.weight_volume * factor * bits
            gamma_hat.accumulate_grad(np.broadcast_to(gg, gamma_hat.data.shape).copy())
        out._backward = _bw
    return out


def energy_reg(ctx: LayerCostContext, delta_hat: Tensor, gamma_hat: Tensor,
               lut_matrix: np.ndarray) -> Tensor:
    """Omega times the expected energy per MAC under the gate coefficients."""
    rows, _ = _rows_and_factor(gamma_hat, ctx.c_out)
    if rows == 1:
        gbar = gamma_hat.data[0]
    else:
        gbar = gamma_hat.data.sum(axis=0) / ctx.c_out
    per_px = lut_matrix @ gbar
    val = ctx.omega * np.dot(delta_hat.data, per_px)
    out = _result(np.asarray(val), (delta_hat, gamma_hat))
    if out.requires_grad:
        def _bw(g):
            g = float(g)
            if delta_hat.requires_grad:
                delta_hat.accumulate_grad(g * ctx.omega * per_px)
            if gamma_hat.requires_grad:
                row = g * ctx.omega * (delta_hat.data @ lut_matrix)
                if rows == 1:
                    gamma_hat.accumulate_grad(row[None, :].copy())
                else:
                    gamma_hat.accumulate_grad(
                        np.broadcast_to(row / ctx.c_out, gamma_hat.data.shape).copy())
        out._backward = _bw
    return out


def total_reg(net: Network, gates: GateState, mode: str,
              lut: CostLUT | None = None) -> Tensor:
    """Sum of the per-layer regularizer over all searchable layers."""
    if mode not in ("size", "energy"):
        raise ConfigError(f"reg mode must be 'size' or 'energy', got {mode!r}")
    if mode == "energy" and lut is None:
        raise ConfigError("energy mode requires a cost LUT")
    lut_matrix = lut.matrix(gates.p_x, gates.p_w) if mode == "energy" else None
    total: Tensor | None = None
    for idx in net.searchable_indices():
        ctx = LayerCostContext.of(net, idx)
        if mode == "size":
            term = size_reg(ctx, gates.gamma_hat(idx), gates.p_w)
        else:
            term = energy_reg(ctx, gates.delta_hat(idx), gates.gamma_hat(idx), lut_matrix)
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.asarray(0.0))
    return total


# -- exact accounting ------------------------------------------------------------


def exact_model_size(layers: list[LayerSpec], assignment: PrecisionAssignment) -> int:
    """Weight storage in bits of a discretized model (integer arithmetic)."""
    total = 0
    for idx, bits in assignment.weight_bits.items():
        total += layers[idx].weight_volume * int(np.sum(bits))
    return total


def exact_model_energy(contexts: dict[int, LayerCostContext],
                       assignment: PrecisionAssignment, lut: CostLUT,
                       p_x: PrecisionSet, p_w: PrecisionSet,
                       unit: str = "uJ") -> float:
    """Energy of a discretized model; channel costs averaged per layer.

    Computed through the same contraction as `energy_reg` evaluated at the
    one-hot gate coefficients, so the two agree exactly; the default unit
    converts picojoules to microjoules at the very end.
    """
    lut_matrix = lut.matrix(p_x, p_w)
    total_pj = 0.0
    for idx, act_bits in assignment.act_bits.items():
        ctx = contexts[idx]
        wbits = assignment.weight_bits[idx]
        counts = np.array([(wbits == b).sum() for b in p_w], dtype=np.float64)
        gbar = counts / ctx.c_out
        per_px = lut_matrix @ gbar
        total_pj = total_pj + ctx.omega * per_px[p_x.index(act_bits)]
    if unit == "pJ":
        return float(total_pj)
    if unit == "uJ":
        return float(total_pj) / PJ_PER_UJ
    raise ConfigError(f"unknown energy unit {unit!r}")


def count_search_space(layers: list[LayerSpec], p_w: PrecisionSet,
                       p_x: PrecisionSet, mode: str) -> float:
    """log10 of the number of admissible precision assignments."""
    search = [s for s in layers if s.is_quantized and s.searchable]
    n_layers = len(search)
    if mode == "layerwise":
        return n_layers * (math.log10(len(p_w)) + math.log10(len(p_x)))
    if mode == "channelwise":
        total_channels = sum(s.out_channels for s in search)
        return n_layers * math.log10(len(p_x)) + total_channels * math.log10(len(p_w))
    raise ConfigError(f"mode must be 'layerwise' or 'channelwise', got {mode!r}")
