"""Warmup / search / fine-tune behavior and trainer invariants."""

import numpy as np
import pytest

from mixprec import (DivergenceError, GateState, LayerSpec, Network, PrecisionSet,
                     TrainConfig, early_stop, evaluate, finetune, run_search,
                     search_epoch, total_reg, warmup)
from mixprec.data import synthetic_dataset
from mixprec.optim import SGD, Adam
from mixprec.train import LossBreakdown, load_checkpoint, save_checkpoint
from util import reference_early_stop

P248 = PrecisionSet((2, 4, 8))


def fc_layers(hidden=8):
    return [
        LayerSpec(kind="fc", in_features=2, out_features=hidden),
        LayerSpec(kind="relu"),
        LayerSpec(kind="fc", in_features=hidden, out_features=2),
    ]


@pytest.fixture(scope="module")
def blobs():
    return synthetic_dataset("blobs", 160, seed=3)


def small_cfg(**kw):
    base = dict(epochs_warmup=3, epochs_finetune=2, max_search_epochs=4,
                batch_size=16, lr_w=0.1, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestWarmup:
    def test_zero_epochs_leaves_weights_unchanged(self, blobs):
        net = Network(fc_layers(), (2,), seed=1)
        before = {k: v.copy() for k, v in net.state_dict().items()}
        warmup(net, blobs, small_cfg(epochs_warmup=0))
        after = net.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_blobs_linearly_separable_sanity(self, blobs):
        net = Network(fc_layers(), (2,), seed=1)
        cfg = small_cfg(epochs_warmup=20)
        warmup(net, blobs, cfg)
        _, train_acc = evaluate(net, blobs.x_train, blobs.y_train, cfg,
                                assignment=net.uniform_assignment(8))
        assert train_acc >= 0.99

    def test_gate_logits_untouched(self, blobs):
        net = Network(fc_layers(), (2,), seed=2)
        gates = GateState(net.layer_channels(), P248, P248)
        before = gates.snapshot()
        warmup(net, blobs, small_cfg())
        after = gates.snapshot()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_divergence_aborts_with_diagnostic(self, blobs):
        # mse gradients scale with the prediction, so an absurd lr explodes
        # exponentially until the loss overflows
        net = Network(fc_layers(), (2,), seed=3)
        with pytest.raises(DivergenceError, match="warmup"):
            warmup(net, blobs, small_cfg(lr_w=1e30, epochs_warmup=8, loss="mse"))


def _search_setup(blobs, cfg, seed=4, tied=False):
    net = Network(fc_layers(), (2,), seed=seed)
    warmup(net, blobs, small_cfg(epochs_warmup=2))
    gates = GateState(net.layer_channels(), P248, P248, tau=cfg.tau_init, tied=tied)
    opt_w = SGD(net.weight_params(), cfg.lr_w, cfg.momentum)
    opt_clip = SGD(net.clip_params(), cfg.lr_clip)
    opt_theta = Adam(gates.parameters(include_delta=(cfg.reg_mode == "energy")),
                     cfg.lr_theta)
    return net, gates, opt_w, opt_clip, opt_theta


class TestSearchEpoch:
    def test_20_80_split_with_10_batches(self, blobs):
        cfg = small_cfg(batch_size=16)  # 160 samples -> 10 batches
        net, gates, ow, oc, ot = _search_setup(blobs, cfg)
        phases = []
        search_epoch(net, gates, blobs, cfg, ow, oc, ot, None,
                     np.random.default_rng(0), on_batch=lambda p, i: phases.append(p))
        assert phases.count("gate") == 2
        assert phases.count("weight") == 8
        assert phases[:2] == ["gate", "gate"]

    def test_phase_isolation(self, blobs):
        cfg = small_cfg()
        net, gates, ow, oc, ot = _search_setup(blobs, cfg)
        w_snap = {}
        theta_snap = {}

        def snap():
            return ({i: net.weights[i].data.copy() for i in net.weights},
                    gates.snapshot())

        def on_batch(phase, i):
            w_now, t_now = snap()
            if phase == "gate":
                assert all(np.array_equal(w_snap[k], w_now[k]) for k in w_now)
            else:
                for k, v in t_now.items():
                    if k != "tau":
                        assert np.array_equal(theta_snap[k], v)
            w_snap.update(w_now)
            theta_snap.update(t_now)

        w0, t0 = snap()
        w_snap.update(w0)
        theta_snap.update(t0)
        search_epoch(net, gates, blobs, cfg, ow, oc, ot, None,
                     np.random.default_rng(0), on_batch=on_batch)

    def test_lambda_zero_reg_gradient_vanishes(self, blobs):
        cfg = small_cfg(lambda_reg=0.0)
        net, gates, *_ = _search_setup(blobs, cfg)
        # gradient of task + 0 * reg on theta equals gradient of task alone
        x, y = blobs.x_train[:16], blobs.y_train[:16]
        from mixprec.train import _task_loss

        out = net.forward_search(x, gates, "size")
        loss = _task_loss(out, y, "ce") + total_reg(net, gates, "size") * 0.0
        loss.backward()
        with_reg = {i: gates.gamma[i].grad.copy() for i in gates.gamma}
        for i in gates.gamma:
            gates.gamma[i].zero_grad()
        out2 = net.forward_search(x, gates, "size")
        _task_loss(out2, y, "ce").backward()
        for i in gates.gamma:
            assert np.array_equal(with_reg[i], gates.gamma[i].grad)

    def test_tau_annealed_once_per_epoch(self, blobs):
        cfg = small_cfg()
        net, gates, ow, oc, ot = _search_setup(blobs, cfg)
        tau0 = gates.tau
        search_epoch(net, gates, blobs, cfg, ow, oc, ot, None, np.random.default_rng(0))
        assert gates.tau == tau0 * np.exp(-cfg.anneal_rate)

    def test_huge_lambda_slams_gamma_to_min_bits(self, blobs):
        cfg = small_cfg(lambda_reg=1e3, max_search_epochs=10, lr_theta=0.05)
        net, gates, ow, oc, ot = _search_setup(blobs, cfg)
        rng = np.random.default_rng(0)
        for epoch in range(10):
            search_epoch(net, gates, blobs, cfg, ow, oc, ot, None, rng, epoch=epoch)
        a = gates.discretize()
        for i in a.weight_bits:
            assert np.all(a.weight_bits[i] == 2)

    def test_loss_breakdown_decomposition(self):
        b = LossBreakdown.of(task=1.25, reg=400.0, lam=1e-3)
        assert b.total == 1.25 + 1e-3 * 400.0


class TestEarlyStop:
    def test_strictly_improving_never_stops(self):
        history = list(np.linspace(1.0, 0.1, 30))
        for k in range(1, len(history) + 1):
            assert not early_stop(history[:k], patience=5)

    def test_flat_history_stops_at_patience_plus_one(self):
        flat = [0.5] * 6
        assert not early_stop(flat[:5], patience=5)
        assert early_stop(flat, patience=5)

    def test_matches_scalar_reference_on_noisy_history(self, rng):
        for trial in range(30):
            history = list(rng.normal(1.0, 0.3, size=rng.integers(2, 25)))
            for patience in (3, 5, 10):
                got = early_stop(history, patience)
                want = reference_early_stop(history, patience)
                assert got == want, (history, patience)


class TestFinetune:
    def test_zero_epochs_keeps_post_discretization_metrics(self, blobs):
        cfg = small_cfg(epochs_finetune=0)
        net, gates, *_ = _search_setup(blobs, cfg)
        a = gates.discretize()
        before = evaluate(net, blobs.x_val, blobs.y_val, cfg, assignment=a)
        finetune(net, a, blobs, cfg)
        after = evaluate(net, blobs.x_val, blobs.y_val, cfg, assignment=a)
        assert before == after

    def test_assignment_frozen(self, blobs):
        cfg = small_cfg()
        net, gates, *_ = _search_setup(blobs, cfg)
        a = gates.discretize()
        act_before = dict(a.act_bits)
        bits_before = {k: v.copy() for k, v in a.weight_bits.items()}
        finetune(net, a, blobs, cfg)
        assert a.act_bits == act_before
        assert all(np.array_equal(bits_before[k], a.weight_bits[k]) for k in bits_before)

    def test_finetune_does_not_hurt_much(self, blobs):
        cfg = small_cfg(epochs_warmup=10, epochs_finetune=5)
        net, gates, *_ = _search_setup(blobs, cfg)
        a = gates.discretize()
        _, acc_before = evaluate(net, blobs.x_val, blobs.y_val, cfg, assignment=a)
        finetune(net, a, blobs, cfg)
        _, acc_after = evaluate(net, blobs.x_val, blobs.y_val, cfg, assignment=a)
        assert acc_after >= acc_before - 0.01


class TestRunSearch:
    def test_deterministic_given_seed(self, blobs):
        cfg = small_cfg(lambda_reg=1e-4, max_search_epochs=3)
        kw = dict(lut=None, tied=False)
        r1, wu1, s1 = run_search(fc_layers(), (2,), blobs, cfg, P248, P248, **kw)
        r2, wu2, s2 = run_search(fc_layers(), (2,), blobs, cfg, P248, P248, **kw)
        assert r1.val_score == r2.val_score
        assert r1.size_bits == r2.size_bits
        assert r1.curves == r2.curves
        assert all(np.array_equal(s1[k], s2[k]) for k in s1)
        for i in r1.assignment.weight_bits:
            assert np.array_equal(r1.assignment.weight_bits[i],
                                  r2.assignment.weight_bits[i])

    def test_warmup_state_reuse_is_equivalent(self, blobs):
        cfg = small_cfg(lambda_reg=1e-4, max_search_epochs=2)
        r1, warmup_state, _ = run_search(fc_layers(), (2,), blobs, cfg, P248, P248)
        r2, _, _ = run_search(fc_layers(), (2,), blobs, cfg, P248, P248,
                              warmup_state=warmup_state)
        assert r1.val_score == r2.val_score
        assert r1.curves == r2.curves

    def test_tau_trajectory_closed_form(self, blobs):
        cfg = small_cfg(max_search_epochs=5, patience=50)
        result, _, _ = run_search(fc_layers(), (2,), blobs, cfg, P248, P248)
        for row in result.curves:
            k = row["epoch"] + 1  # annealed at the end of each epoch
            assert abs(row["tau"] - 5.0 * np.exp(-0.0045 * k)) < 1e-12

    def test_curve_rows_decompose(self, blobs):
        cfg = small_cfg(lambda_reg=2e-3, max_search_epochs=3)
        result, _, _ = run_search(fc_layers(), (2,), blobs, cfg, P248, P248)
        for row in result.curves:
            assert abs(row["total"] - (row["task_loss"] + cfg.lambda_reg * row["reg"])) < 1e-12

    def test_checkpoint_roundtrip_bit_exact(self, blobs, tmp_path):
        net = Network(fc_layers(), (2,), seed=11)
        warmup(net, blobs, small_cfg(epochs_warmup=1))
        state = net.state_dict()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(state, path)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(state)
        assert all(np.array_equal(state[k], loaded[k]) for k in state)
