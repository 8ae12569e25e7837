"""Independent oracles and helpers shared across the test suite.

Everything here is deliberately written as plain loops / brute force so
it stays independent of the library's vectorized implementations.
"""

import math

import numpy as np


def fd_grad(f, arrays, wrt, h=1e-5):
    """Central finite differences of scalar f(*arrays) w.r.t. arrays[wrt]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[wrt]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        fp = f(*arrays)
        target[idx] = orig - h
        fm = f(*arrays)
        target[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(got, want, floor=1e-6):
    """max |got-want| / max(|want|, floor) over all elements."""
    got, want = np.asarray(got), np.asarray(want)
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), floor)))


def naive_conv2d(x, w, bias=None, stride=1, padding=0):
    """Six explicit loops; the reference for conv2d_forward."""
    n, c_in, h, width = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (width + 2 * padding - kw) // stride + 1
    xp = np.zeros((n, c_in, h + 2 * padding, width + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + width] = x
    out = np.zeros((n, c_out, oh, ow))
    for b in range(n):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def naive_fc(x, w, bias=None):
    n, f_in = x.shape
    f_out = w.shape[0]
    out = np.zeros((n, f_out))
    for b in range(n):
        for o in range(f_out):
            acc = 0.0
            for i in range(f_in):
                acc += x[b, i] * w[o, i]
            out[b, o] = acc + (bias[o] if bias is not None else 0.0)
    return out


def scalar_round_half_away(v):
    return math.floor(v + 0.5) if v >= 0 else math.ceil(v - 0.5)


def scalar_quantize(values, bits, alpha, beta):
    """Literal scalar-loop affine quantizer: codes in [0, 2^n - 1]."""
    eps = (beta - alpha) / (2 ** bits - 1)
    codes = []
    for v in np.asarray(values).ravel():
        c = scalar_round_half_away((v - alpha) / eps)
        c = min(max(c, 0), 2 ** bits - 1)
        codes.append(int(c))
    return np.array(codes, dtype=np.int64).reshape(np.shape(values))


def scalar_dequantize(codes, bits, alpha, beta):
    """Scalar-loop dequantizer with the same endpoint rule as the library:
    the saturated top code returns beta exactly."""
    eps = (beta - alpha) / (2 ** bits - 1)
    top = 2 ** bits - 1
    vals = []
    for c in np.asarray(codes).ravel():
        vals.append(beta if c == top else alpha + c * eps)
    return np.array(vals, dtype=np.float64).reshape(np.shape(codes))


def reference_early_stop(history, patience):
    """Scalar re-implementation: no improvement for `patience` epochs."""
    best = math.inf
    stale = 0
    for value in history:
        if value < best:
            best = value
            stale = 0
        else:
            stale += 1
    return stale >= patience


def brute_force_pareto(records, cost_key):
    """O(n^2) dominance filter under (maximize score, minimize cost)."""
    keep = []
    for i, r in enumerate(records):
        dominated = False
        for j, s in enumerate(records):
            if i == j:
                continue
            better_eq = (float(s["score"]) >= float(r["score"])
                         and float(s[cost_key]) <= float(r[cost_key]))
            strictly = (float(s["score"]) > float(r["score"])
                        or float(s[cost_key]) < float(r[cost_key]))
            if better_eq and strictly:
                dominated = True
                break
        if not dominated:
            keep.append(r)
    return keep


def sort_oracle_permutation(bits):
    """Stable ascending sort by bit-width via Python's sorted()."""
    return [i for i, _ in sorted(enumerate(bits), key=lambda p: p[1])]


def mobilenet_v1_025_layers():
    """MobileNetV1 width-multiplier 0.25 shape table (96x96 input, 2-class
    head): 28 conv/fc layers, 2738 output channels in total."""
    from mixprec import LayerSpec

    def conv(c_in, c_out, k=3):
        return LayerSpec(kind="conv2d", c_in=c_in, c_out=c_out, k_x=k, k_y=k)

    layers = [conv(3, 8)]
    blocks = [(8, 16), (16, 32), (32, 32), (32, 64), (64, 64), (64, 128),
              (128, 128), (128, 128), (128, 128), (128, 128), (128, 128),
              (128, 256), (256, 256)]
    for c_in, c_out in blocks:
        layers.append(conv(c_in, c_in))       # depthwise stage
        layers.append(conv(c_in, c_out, k=1))  # pointwise stage
    layers.append(LayerSpec(kind="fc", in_features=256, out_features=2))
    return layers
