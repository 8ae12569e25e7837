"""Deployment lowering: reorder channels by bit-width, split per precision.

Pipeline: plan per-layer channel permutations (stable sort by ascending
bit-width), permute producer filters plus the consumer's input axis,
split every quantized layer into one sub-layer per distinct precision,
verify functional equivalence, and export a self-contained container.

Equivalence is checked in the deployment arithmetic domain: activations
and weights as integer codes, int64 accumulation (exact, so reduction
order cannot matter), then one per-channel float rescale. That is the
arithmetic mixed-precision integer kernels execute, and it makes channel
reordering bit-exact; a float-domain convolution would differ in final
ulps because permuting input channels permutes a non-associative float
reduction.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EquivalenceError
from .fileio import atomic_write_bytes
from .gates import PrecisionAssignment
from .model import LayerSpec, Network
from .quantize import AffineQuantParams, affine_quantize, channel_ranges, check_bits, round_half_away
from .tensor import _im2col, _pool_view

FORMAT_VERSION = 1
DEFAULT_BITS = 8


@dataclass
class DeployModel:
    """Frozen float weights + clips + a discrete precision assignment."""

    layers: list[LayerSpec]
    state: dict[str, np.ndarray]
    assignment: PrecisionAssignment
    input_shape: tuple

    @classmethod
    def from_network(cls, net: Network, assignment: PrecisionAssignment) -> "DeployModel":
        return cls(list(net.layers), net.state_dict(), assignment, net.input_shape)

    def copy(self) -> "DeployModel":
        return DeployModel(
            list(self.layers),
            {k: v.copy() for k, v in self.state.items()},
            PrecisionAssignment(dict(self.assignment.act_bits),
                                {k: v.copy() for k, v in self.assignment.weight_bits.items()}),
            self.input_shape,
        )


@dataclass
class ChannelPermutation:
    layer: int
    perm: np.ndarray  # gather indices: new channel k was original channel perm[k]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(len(self.perm))))


@dataclass
class SubLayer:
    bits: int
    positions: np.ndarray   # output slots this group writes, within the layer's C_out
    codes: np.ndarray       # uint8, [g] + per-channel weight shape
    ranges: np.ndarray      # float64 [g], symmetric range r_i per channel
    bias: np.ndarray | None


@dataclass
class LoweredLayer:
    index: int
    kind: str
    stride: int
    padding: int
    act_bits: int
    clip: float
    c_out: int
    sublayers: list[SubLayer]
    permuted: bool = False


@dataclass
class PassLayer:
    index: int
    kind: str
    window: int = 0
    residual_from: int = -1


@dataclass
class LoweredModel:
    format_version: int
    input_shape: tuple
    records: list
    report: list[str] = field(default_factory=list)

    def quant_layers(self) -> list[LoweredLayer]:
        return [r for r in self.records if isinstance(r, LoweredLayer)]

    def size_bits(self) -> int:
        total = 0
        for rec in self.quant_layers():
            for sub in rec.sublayers:
                volume = int(np.prod(sub.codes.shape[1:]))
                total += volume * sub.bits * len(sub.positions)
        return total


# -- permutation planning ----------------------------------------------------------


def plan_permutation(bits: np.ndarray) -> np.ndarray:
    """Stable ascending sort of channels by assigned bit-width."""
    return np.argsort(np.asarray(bits), kind="stable")


def _consumers(layers: list[LayerSpec]) -> dict[int, list[int]]:
    cons: dict[int, list[int]] = {i: [] for i in range(len(layers))}
    for j, spec in enumerate(layers):
        if j > 0:
            cons[j - 1].append(j)
        if spec.kind == "add":
            cons[spec.residual_from].append(j)
    return cons


def single_conv_consumer(layers: list[LayerSpec], producer: int) -> int | None:
    """The unique conv/fc consuming `producer`'s output, or None.

    None means the permutation must be skipped: the value feeds a
    residual add, fans out, or escapes as the model output (which also
    covers the never-permute-the-last-layer rule).
    """
    cons = _consumers(layers)
    last = len(layers) - 1
    targets: list[int] = []
    stack = [producer]
    while stack:
        k = stack.pop()
        if k == last:
            return None
        for j in cons[k]:
            kind = layers[j].kind
            if kind == "add":
                return None
            if kind in ("conv2d", "fc"):
                targets.append(j)
            else:
                stack.append(j)
    return targets[0] if len(targets) == 1 else None


def plan_all_permutations(deploy: DeployModel) -> tuple[list[ChannelPermutation], list[str]]:
    perms, report = [], []
    for idx in sorted(deploy.assignment.weight_bits):
        consumer = single_conv_consumer(deploy.layers, idx)
        if consumer is None:
            report.append(f"layer {idx}: permutation skipped "
                          f"(residual/fan-out or model output)")
            continue
        perms.append(ChannelPermutation(idx, plan_permutation(deploy.assignment.weight_bits[idx])))
    return perms, report


def _permute_consumer_in_axis(deploy: DeployModel, consumer: int,
                              producer_c_out: int, perm: np.ndarray):
    spec = deploy.layers[consumer]
    w = deploy.state[f"w{consumer}"]
    if spec.kind == "conv2d":
        deploy.state[f"w{consumer}"] = w[:, perm]
        return
    # fc after a (possibly flattened) producer: permute feature blocks
    block, rem = divmod(spec.in_features, producer_c_out)
    if rem:
        raise ConfigError(
            f"layer {consumer} (fc): in_features {spec.in_features} not divisible by "
            f"producer channels {producer_c_out}")
    cols = (perm[:, None] * block + np.arange(block)[None, :]).reshape(-1)
    deploy.state[f"w{consumer}"] = w[:, cols]


def apply_permutation(deploy: DeployModel,
                      perms: list[ChannelPermutation]) -> DeployModel:
    """Permute producers' output channels and the consumers' input axis.

    The network function is unchanged: each permuted producer has exactly
    one conv/fc consumer (checked at planning time).
    """
    out = deploy.copy()
    for cp in perms:
        idx, perm = cp.layer, cp.perm
        consumer = single_conv_consumer(out.layers, idx)
        if consumer is None:
            raise ConfigError(f"layer {idx} has no unique conv/fc consumer; cannot permute")
        out.state[f"w{idx}"] = out.state[f"w{idx}"][perm]
        if f"b{idx}" in out.state:
            out.state[f"b{idx}"] = out.state[f"b{idx}"][perm]
        out.assignment.weight_bits[idx] = out.assignment.weight_bits[idx][perm]
        _permute_consumer_in_axis(out, consumer, len(perm), perm)
    return out


# -- splitting -----------------------------------------------------------------------


def _weight_code_table(w: np.ndarray, bits_per_channel: np.ndarray):
    """(codes int64, ranges, eps) per channel under symmetric quantization."""
    ranges = channel_ranges(w)
    codes = np.zeros_like(w, dtype=np.int64)
    eps = np.zeros_like(ranges)
    shape = (-1,) + (1,) * (w.ndim - 1)
    for bits in np.unique(bits_per_channel):
        check_bits(int(bits))
        denom = 2 ** int(bits) - 1
        sel = bits_per_channel == bits
        r = ranges[sel].reshape(shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            e = 2.0 * r / denom
            c = np.clip(round_half_away((w[sel] + r) / e), 0, denom)
        codes[sel] = np.where(r > 0, c, 0.0).astype(np.int64)
        eps[sel] = np.where(ranges[sel] > 0, 2.0 * ranges[sel] / denom, 0.0)
    return codes, ranges, eps


def split_layer(spec: LayerSpec, w: np.ndarray, bias: np.ndarray | None,
                bits_per_channel: np.ndarray) -> list[SubLayer]:
    """One sub-layer per distinct precision, ascending; positions record
    where each group's output channels live in the full layer output."""
    codes, ranges, _ = _weight_code_table(w, bits_per_channel)
    subs = []
    for bits in np.unique(bits_per_channel):
        sel = np.flatnonzero(bits_per_channel == bits)
        subs.append(SubLayer(
            bits=int(bits),
            positions=sel.astype(np.int64),
            codes=codes[sel].astype(np.uint8),
            ranges=ranges[sel].astype(np.float64),
            bias=None if bias is None else bias[sel].astype(np.float64),
        ))
    return subs


def lower_model(deploy: DeployModel) -> LoweredModel:
    """plan -> permute -> split, keeping pass-through layers in place."""
    perms, report = plan_all_permutations(deploy)
    permuted = apply_permutation(deploy, perms)
    permuted_idx = {cp.layer for cp in perms if not cp.is_identity()}
    records: list = []
    for i, spec in enumerate(permuted.layers):
        if spec.is_quantized:
            wbits = permuted.assignment.weight_bits.get(
                i, np.full(spec.out_channels, DEFAULT_BITS, dtype=np.int64))
            records.append(LoweredLayer(
                index=i, kind=spec.kind, stride=spec.stride, padding=spec.padding,
                act_bits=int(permuted.assignment.act_bits.get(i, DEFAULT_BITS)),
                clip=float(permuted.state[f"clip{i}"]),
                c_out=spec.out_channels,
                sublayers=split_layer(spec, permuted.state[f"w{i}"],
                                      permuted.state.get(f"b{i}"), wbits),
                permuted=i in permuted_idx,
            ))
        else:
            records.append(PassLayer(index=i, kind=spec.kind, window=spec.window,
                                     residual_from=spec.residual_from))
    return LoweredModel(FORMAT_VERSION, permuted.input_shape, records, report)


# -- integer-exact evaluation ----------------------------------------------------------


def _rescale_conv(a1, a2, eps_x, eps_w, ranges, bias):
    """out[n,o,p] = eps_x*eps_w[o]*a1[n,o,p] - eps_x*r[o]*a2[n,p] (+bias).

    Shared between original and lowered evaluation so the per-channel
    float expression is identical on both sides.
    """
    out = (eps_w[None, :, None] * a1) * eps_x - (ranges[None, :, None] * a2[:, None, :]) * eps_x
    if bias is not None:
        out = out + bias[None, :, None]
    return out


def _rescale_fc(a1, a2, eps_x, eps_w, ranges, bias):
    out = (eps_w[None, :] * a1) * eps_x - (ranges[None, :] * a2[:, None]) * eps_x
    if bias is not None:
        out = out + bias[None, :]
    return out


def _act_codes(x: np.ndarray, clip: float, bits: int):
    q = AffineQuantParams(bits, 0.0, clip)
    return affine_quantize(x, q), q.eps


def _conv_accumulate(cx_cols: np.ndarray, codes_mat: np.ndarray):
    a1 = np.einsum("ok,nkp->nop", codes_mat, cx_cols)
    a2 = cx_cols.sum(axis=1)
    return a1, a2


def _quant_layer_eval(spec: LayerSpec, h: np.ndarray, w: np.ndarray,
                      bias: np.ndarray | None, wbits: np.ndarray,
                      act_bits: int, clip: float) -> np.ndarray:
    cx, eps_x = _act_codes(h, clip, act_bits)
    codes, ranges, eps_w = _weight_code_table(w, wbits)
    if spec.kind == "conv2d":
        n = h.shape[0]
        cols = _im2col(cx, spec.k_y, spec.k_x, spec.stride, spec.padding)
        a1, a2 = _conv_accumulate(cols, codes.reshape(spec.c_out, -1))
        oh = (h.shape[2] + 2 * spec.padding - spec.k_y) // spec.stride + 1
        ow = (h.shape[3] + 2 * spec.padding - spec.k_x) // spec.stride + 1
        out = _rescale_conv(a1, a2, eps_x, eps_w, ranges, bias)
        return out.reshape(n, spec.c_out, oh, ow)
    a1 = cx @ codes.T
    a2 = cx.sum(axis=1)
    return _rescale_fc(a1, a2, eps_x, eps_w, ranges, bias)


def _passthrough_eval(kind: str, h: np.ndarray, window: int,
                      residual: np.ndarray | None) -> np.ndarray:
    if kind == "relu":
        return np.maximum(h, 0.0)
    if kind == "avgpool":
        v, _ = _pool_view(h, window)
        return v.mean(axis=-1)
    if kind == "maxpool":
        v, _ = _pool_view(h, window)
        return v.max(axis=-1)
    if kind == "flatten":
        return h.reshape(h.shape[0], -1)
    if kind == "add":
        return h + residual
    raise ConfigError(f"unknown pass-through kind {kind!r}")


def quantized_forward(deploy: DeployModel, x: np.ndarray,
                      default_bits: int = DEFAULT_BITS) -> np.ndarray:
    """Integer-kernel evaluation of a discretized (unsplit) model."""
    h = np.asarray(x, dtype=np.float64)
    outputs: list[np.ndarray] = []
    for i, spec in enumerate(deploy.layers):
        if spec.is_quantized:
            wbits = deploy.assignment.weight_bits.get(
                i, np.full(spec.out_channels, default_bits, dtype=np.int64))
            act_bits = deploy.assignment.act_bits.get(i, default_bits)
            h = _quant_layer_eval(spec, h, deploy.state[f"w{i}"],
                                  deploy.state.get(f"b{i}"), wbits,
                                  act_bits, float(deploy.state[f"clip{i}"]))
        else:
            res = outputs[spec.residual_from] if spec.kind == "add" else None
            h = _passthrough_eval(spec.kind, h, spec.window, res)
        outputs.append(h)
    return h


def lowered_forward(lowered: LoweredModel, x: np.ndarray) -> np.ndarray:
    """Evaluate the split model: per-precision sub-layers, shared input codes."""
    h = np.asarray(x, dtype=np.float64)
    outputs: list[np.ndarray] = []
    for rec in lowered.records:
        if isinstance(rec, LoweredLayer):
            cx, eps_x = _act_codes(h, rec.clip, rec.act_bits)
            if rec.kind == "conv2d":
                n, _, hh, ww = h.shape
                ky, kx = rec.sublayers[0].codes.shape[2:4]
                cols = _im2col(cx, ky, kx, rec.stride, rec.padding)
                oh = (hh + 2 * rec.padding - ky) // rec.stride + 1
                ow = (ww + 2 * rec.padding - kx) // rec.stride + 1
                a2 = cols.sum(axis=1)
                out = np.empty((n, rec.c_out, oh * ow))
                for sub in rec.sublayers:
                    denom = 2 ** sub.bits - 1
                    eps_w = np.where(sub.ranges > 0, 2.0 * sub.ranges / denom, 0.0)
                    codes = sub.codes.astype(np.int64).reshape(len(sub.positions), -1)
                    a1 = np.einsum("ok,nkp->nop", codes, cols)
                    out[:, sub.positions] = _rescale_conv(
                        a1, a2, eps_x, eps_w, sub.ranges, sub.bias)
                h = out.reshape(n, rec.c_out, oh, ow)
            else:
                a2 = cx.sum(axis=1)
                out = np.empty((h.shape[0], rec.c_out))
                for sub in rec.sublayers:
                    denom = 2 ** sub.bits - 1
                    eps_w = np.where(sub.ranges > 0, 2.0 * sub.ranges / denom, 0.0)
                    a1 = cx @ sub.codes.astype(np.int64).T
                    out[:, sub.positions] = _rescale_fc(
                        a1, a2, eps_x, eps_w, sub.ranges, sub.bias)
                h = out
        else:
            res = outputs[rec.residual_from] if rec.kind == "add" else None
            h = _passthrough_eval(rec.kind, h, rec.window, res)
        outputs.append(h)
    return h


def verify_equivalence(deploy: DeployModel, lowered: LoweredModel,
                       n_inputs: int = 8, seed: int = 0) -> float:
    """Max element-wise |original - lowered| over random inputs.

    The last layer is never permuted, so outputs align channel-for-channel.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n_inputs,) + tuple(deploy.input_shape))
    ref = quantized_forward(deploy, x)
    got = lowered_forward(lowered, x)
    if ref.shape != got.shape:
        raise EquivalenceError(f"output shapes differ: {ref.shape} vs {got.shape}")
    return float(np.max(np.abs(ref - got)))


# -- container format -------------------------------------------------------------------


def export_lowered(lowered: LoweredModel, path):
    """Zip container: manifest.json + raw little-endian arrays per sub-layer."""
    manifest: dict = {
        "format_version": lowered.format_version,
        "input_shape": list(lowered.input_shape),
        "report": list(lowered.report),
        "records": [],
    }
    blobs: dict[str, bytes] = {}
    for rec in lowered.records:
        if isinstance(rec, PassLayer):
            manifest["records"].append({
                "type": "pass", "index": rec.index, "kind": rec.kind,
                "window": rec.window, "residual_from": rec.residual_from,
            })
            continue
        groups = []
        for g, sub in enumerate(rec.sublayers):
            base = f"layers/{rec.index}/g{g}"
            blobs[f"{base}.codes"] = sub.codes.astype("<u1").tobytes()
            blobs[f"{base}.ranges"] = sub.ranges.astype("<f8").tobytes()
            blobs[f"{base}.positions"] = sub.positions.astype("<i8").tobytes()
            entry = {"bits": sub.bits, "channels": len(sub.positions),
                     "codes_shape": list(sub.codes.shape), "prefix": base,
                     "has_bias": sub.bias is not None}
            if sub.bias is not None:
                blobs[f"{base}.bias"] = sub.bias.astype("<f8").tobytes()
            groups.append(entry)
        manifest["records"].append({
            "type": "quant", "index": rec.index, "kind": rec.kind,
            "stride": rec.stride, "padding": rec.padding,
            "act_bits": rec.act_bits, "clip": rec.clip, "c_out": rec.c_out,
            "permuted": rec.permuted, "groups": groups,
        })
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        for name, payload in sorted(blobs.items()):
            zf.writestr(name, payload)
    atomic_write_bytes(path, buf.getvalue())


def load_lowered(path) -> LoweredModel:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ConfigError(
                f"unsupported lowered-model format version {manifest.get('format_version')}")
        records: list = []
        for rec in manifest["records"]:
            if rec["type"] == "pass":
                records.append(PassLayer(index=rec["index"], kind=rec["kind"],
                                         window=rec["window"],
                                         residual_from=rec["residual_from"]))
                continue
            subs = []
            for entry in rec["groups"]:
                base = entry["prefix"]
                codes = np.frombuffer(zf.read(f"{base}.codes"), dtype="<u1")
                codes = codes.reshape(entry["codes_shape"]).astype(np.uint8)
                ranges = np.frombuffer(zf.read(f"{base}.ranges"), dtype="<f8").astype(np.float64)
                positions = np.frombuffer(zf.read(f"{base}.positions"), dtype="<i8").astype(np.int64)
                bias = None
                if entry["has_bias"]:
                    bias = np.frombuffer(zf.read(f"{base}.bias"), dtype="<f8").astype(np.float64)
                subs.append(SubLayer(bits=entry["bits"], positions=positions,
                                     codes=codes, ranges=ranges, bias=bias))
            records.append(LoweredLayer(
                index=rec["index"], kind=rec["kind"], stride=rec["stride"],
                padding=rec["padding"], act_bits=rec["act_bits"], clip=rec["clip"],
                c_out=rec["c_out"], sublayers=subs, permuted=rec["permuted"]))
    return LoweredModel(manifest["format_version"], tuple(manifest["input_shape"]),
                        records, list(manifest["report"]))
