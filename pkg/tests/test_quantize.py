"""Affine quantizer semantics, STE gradients, and quantizer invariants."""

import numpy as np
import pytest

from mixprec import (AffineQuantParams, PrecisionError, Tensor, affine_quantize,
                     fake_quantize, pact_act_fakequant, weight_fakequant_mixed,
                     weight_fakequant_per_channel)
from mixprec.quantize import channel_ranges
from util import fd_grad, max_rel_err, scalar_dequantize, scalar_quantize


class TestAffineQuantize:
    def test_range_endpoints(self):
        q = AffineQuantParams(4, alpha=-1.0, beta=3.0)
        assert affine_quantize(np.asarray(-1.0), q) == 0
        assert affine_quantize(np.asarray(3.0), q) == 2 ** 4 - 1

    def test_hand_arithmetic(self):
        q = AffineQuantParams(2, alpha=0.0, beta=3.0)
        assert q.eps == 1.0
        assert affine_quantize(np.asarray(1.4), q) == 1

    def test_unsupported_bits(self):
        for bad in (1, 9, 0, 16):
            with pytest.raises(PrecisionError):
                AffineQuantParams(bad, 0.0, 1.0)

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            AffineQuantParams(4, 1.0, 1.0)

    @pytest.mark.parametrize("bits", [2, 4, 8])
    def test_matches_scalar_loop_oracle(self, bits, rng):
        alpha, beta = -0.7, 1.9
        q = AffineQuantParams(bits, alpha, beta)
        t = rng.uniform(-2.5, 3.5, size=2000)
        assert np.array_equal(affine_quantize(t, q), scalar_quantize(t, bits, alpha, beta))
        assert np.array_equal(fake_quantize(t, q),
                              scalar_dequantize(scalar_quantize(t, bits, alpha, beta),
                                                bits, alpha, beta))


class TestFakeQuantize:
    def test_reconstruction_bound(self, rng):
        q = AffineQuantParams(4, alpha=0.0, beta=2.0)
        t = rng.uniform(0.0, 2.0, size=1000)
        assert np.max(np.abs(fake_quantize(t, q) - t)) <= q.eps / 2 * (1 + 1e-9)

    def test_saturation_exact(self):
        q = AffineQuantParams(3, alpha=-0.5, beta=1.25)
        out = fake_quantize(np.array([2.0, 10.0, 1.25]), q)
        assert np.array_equal(out, [1.25, 1.25, 1.25])
        below = fake_quantize(np.array([-3.0]), q)
        assert below[0] == -0.5

    def test_more_bits_not_worse(self, rng):
        t = rng.uniform(0.0, 1.0, size=4096)
        mse = {}
        for bits in (2, 8):
            q = AffineQuantParams(bits, 0.0, 1.0)
            mse[bits] = float(np.mean((fake_quantize(t, q) - t) ** 2))
        assert mse[8] <= mse[2]

    @pytest.mark.parametrize("bits", [2, 3, 8])
    def test_idempotent_exactly(self, bits, rng):
        q = AffineQuantParams(bits, alpha=-1.2, beta=0.9)
        t = rng.uniform(-2.0, 2.0, size=500)
        once = fake_quantize(t, q)
        assert np.array_equal(fake_quantize(once, q), once)

    def test_cardinality_at_most_2n(self, rng):
        for bits in (2, 4, 8):
            q = AffineQuantParams(bits, 0.0, 1.0)
            vals = fake_quantize(rng.uniform(-1, 2, size=5000), q)
            assert len(np.unique(vals)) <= 2 ** bits

    def test_monotone_nondecreasing(self, rng):
        q = AffineQuantParams(3, alpha=-1.0, beta=1.0)
        t = np.sort(rng.uniform(-1.5, 1.5, size=800))
        out = fake_quantize(t, q)
        assert np.all(np.diff(out) >= 0)


class TestPactActivation:
    def test_clamp_behavior(self):
        clip = Tensor(np.asarray(2.0), requires_grad=True)
        x = Tensor(np.array([-1.0, 1.0, 4.0]), requires_grad=True)
        out = pact_act_fakequant(x, clip, 8)
        assert out.data[0] == 0.0
        assert abs(out.data[1] - 1.0) <= 2.0 / 255 / 2
        assert out.data[2] == 2.0

    def test_clip_grad_zero_when_all_below(self):
        clip = Tensor(np.asarray(5.0), requires_grad=True)
        x = Tensor(np.array([0.1, 0.5, 3.0]), requires_grad=True)
        pact_act_fakequant(x, clip, 8).sum().backward()
        assert float(clip.grad) == 0.0

    def test_clip_grad_counts_saturated(self):
        clip = Tensor(np.asarray(1.0), requires_grad=True)
        x = Tensor(np.array([0.2, 2.0, 3.0, -1.0]), requires_grad=True)
        pact_act_fakequant(x, clip, 4).sum().backward()
        assert float(clip.grad) == 2.0
        # STE on x: pass-through inside [0, clip), zero outside
        assert np.array_equal(x.grad, [1.0, 0.0, 0.0, 0.0])

    def test_grads_match_fd_of_ste_surrogate(self, rng):
        # the quantized forward is a staircase, so the oracle differentiates
        # the clamp the STE convention prescribes; sample points >= 1e-3
        # away from the 0 and clip kinks
        clip_val = 1.5
        for trial in range(5):
            rng2 = np.random.default_rng(50 + trial)
            x = rng2.uniform(-1.0, 2.5, size=64)
            keep = (np.abs(x) > 1e-3) & (np.abs(x - clip_val) > 1e-3)
            x = x[keep]
            xt = Tensor(x.copy(), requires_grad=True)
            ct = Tensor(np.asarray(clip_val), requires_grad=True)
            pact_act_fakequant(xt, ct, 8).sum().backward()

            def surrogate(xa, ca):
                return float(np.clip(xa, 0.0, ca).sum())

            fd_x = fd_grad(lambda xa: surrogate(xa, clip_val), [x], 0)
            fd_c = fd_grad(lambda ca: surrogate(x, float(ca)), [np.asarray(clip_val)], 0)
            assert max_rel_err(xt.grad, fd_x, floor=1e-3) < 1e-4
            assert max_rel_err(ct.grad, fd_c, floor=1e-3) < 1e-4

    def test_rejects_nonpositive_clip(self):
        with pytest.raises(ValueError):
            pact_act_fakequant(Tensor(np.ones(3)), Tensor(np.asarray(0.0)), 8)


class TestPerChannelWeights:
    def test_zero_channel_stays_zero(self):
        w = Tensor(np.zeros((2, 3)))
        out = weight_fakequant_per_channel(w, 4)
        assert np.array_equal(out.data, np.zeros((2, 3)))

    def test_endpoints_exact_at_2bit(self):
        r = 0.75
        w = Tensor(np.array([[-r, 0.0, r]]))
        out = weight_fakequant_per_channel(w, 2)
        eps = 2 * r / 3
        assert out.data[0, 0] == -r
        assert out.data[0, 2] == r
        assert abs(out.data[0, 1]) <= eps / 2 + 1e-15

    def test_per_channel_bound_scalar_oracle(self, rng):
        w = rng.normal(size=(6, 4, 3, 3))
        out = weight_fakequant_per_channel(Tensor(w), 8)
        for i in range(6):
            r = np.abs(w[i]).max()
            eps = 2 * r / (2 ** 8 - 1)
            assert np.max(np.abs(out.data[i] - w[i])) <= eps / 2 * (1 + 1e-9)
            # matches the scalar-loop symmetric quantizer channel by channel
            codes = scalar_quantize(w[i], 8, -r, r)
            assert np.array_equal(out.data[i], scalar_dequantize(codes, 8, -r, r))

    def test_ste_identity_backward(self, rng):
        w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        weight_fakequant_per_channel(w, 2).sum().backward()
        assert np.array_equal(w.grad, np.ones((3, 5)))

    def test_mixed_bits_per_channel(self, rng):
        w = rng.normal(size=(4, 6))
        bits = np.array([2, 8, 4, 2])
        out = weight_fakequant_mixed(Tensor(w), bits)
        for i, b in enumerate(bits):
            ref = weight_fakequant_per_channel(Tensor(w[i:i + 1]), int(b))
            assert np.array_equal(out.data[i], ref.data[0])

    def test_weight_sharing_no_hidden_state(self, rng):
        # all fake-quantized copies are pure functions of the float tensor:
        # mutate it and every copy changes on the next forward
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        before = {b: weight_fakequant_per_channel(w, b).data.copy() for b in (2, 4, 8)}
        w.data = w.data * 0.5
        for b in (2, 4, 8):
            after = weight_fakequant_per_channel(w, b).data
            assert not np.array_equal(after, before[b])
            assert np.allclose(after, before[b] * 0.5)  # symmetric range scales with data

    def test_ranges_match_maxabs(self, rng):
        w = rng.normal(size=(5, 2, 3, 3))
        assert np.array_equal(channel_ranges(w), np.abs(w).reshape(5, -1).max(axis=1))
