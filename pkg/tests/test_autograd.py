import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseae import autograd as ag
from sparseae import layers as L
from sparseae.errors import EmptyInput, PatternMismatch
from sparseae.sparse_tensor import build

import gradcheck
import oracles
from conftest import random_tensor


def fd_check(fn, params, h=1e-6, tol=1e-6):
    """Compare tape gradients of scalar ``fn()`` with central differences."""
    for p in params:
        p.grad = None
    with ag.Tape() as tape:
        out = fn()
        tape.backward(out)
    for p in params:
        num = ag.numerical_grad(lambda: fn().value, p, h)
        a = np.zeros_like(p.value) if p.grad is None else p.grad
        assert np.allclose(a, num, rtol=tol, atol=tol), (a, num)


class TestOps:
    def test_linear_quadratic_closed_form(self, rng):
        x = ag.Var(rng.standard_normal((5, 3)))
        w = ag.param(rng.standard_normal((3, 2)))
        with ag.Tape() as tape:
            y = ag.linear(x, w)
            loss = ag.mse(y, np.zeros((5, 2)))
            tape.backward(loss)
        assert np.allclose(w.grad, 2 * x.value.T @ (x.value @ w.value) / 5)

    def test_zero_loss_zero_grad(self, rng):
        x = ag.Var(rng.standard_normal((4, 3)))
        w = ag.param(rng.standard_normal((3, 2)))
        with ag.Tape() as tape:
            loss = ag.mse(ag.linear(x, w), x.value @ w.value)
            tape.backward(loss)
        assert float(loss.value) == 0.0 and not w.grad.any()

    @pytest.mark.parametrize("kind", ["ssc", "sc", "tc", "dc"])
    def test_conv(self, rng, kind):
        x = random_tensor(rng, 2, 6, 2, p=0.5)
        rb = {"ssc": lambda: L.build_ssc_rulebook(x, 3), "sc": lambda: L.build_sc_rulebook(x, 2, 2),
              "tc": lambda: L.build_tc_rulebook(x, 2, 2),
              "dc": lambda: L.build_dc_rulebook(L.build_sc_rulebook(x, 2, 2))}[kind]()
        k = ag.param(rng.standard_normal((len(rb.offsets), 2, 3)))
        b = ag.param(rng.standard_normal(3))
        xin = ag.param(rng.standard_normal((rb.n_in, 2)))
        target = rng.standard_normal((rb.n_out, 3))
        fd_check(lambda: ag.mse(ag.conv(rb, k, b, xin), target), [k, b, xin])

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_batchnorm(self, rng, mode):
        st_ = L.BatchNormState.create(3)
        st_.running_mean = rng.standard_normal(3)
        st_.running_var = rng.uniform(0.5, 2, 3)
        scale, shift = ag.param(rng.uniform(0.5, 2, 3)), ag.param(rng.standard_normal(3))
        x = ag.param(rng.standard_normal((7, 3)))
        target = rng.standard_normal((7, 3))
        fd_check(lambda: ag.mse(ag.batchnorm(st_, scale, shift, x, mode, update=False), target),
                 [scale, shift, x])

    def test_relu_gather_concat_add(self, rng):
        a = ag.param(rng.standard_normal((6, 2)) + 0.05)
        b = ag.param(rng.standard_normal((6, 3)))
        rows = np.array([0, 2, 3, 5])
        target = rng.standard_normal((4, 5))

        def fn():
            c = ag.concat([ag.relu(a), b])
            c = ag.add(c, c)
            return ag.mse(ag.gather(c, rows), target)

        fd_check(fn, [a, b])

    def test_hinge_and_weighted_sum(self, rng):
        x = ag.param(rng.standard_normal((8, 2)) * 2)
        P, N = np.array([0, 3, 4]), np.array([1, 2, 7])
        fd_check(lambda: ag.weighted_sum([ag.hinge_sq(x, P, N), ag.mse(x, np.zeros((8, 2)))], [0.5, 2.0]), [x])

    def test_cross_entropy(self, rng):
        logits = ag.param(rng.standard_normal((5, 4)))
        labels = np.array([0, 3, 1, 1, 2])
        fd_check(lambda: ag.cross_entropy(logits, labels), [logits])
        p = ag.softmax(logits.value)
        assert np.allclose(p.sum(1), 1)

    def test_no_grad(self, rng):
        w = ag.param(rng.standard_normal((2, 2)))
        with ag.Tape() as tape:
            with ag.no_grad():
                y = ag.linear(ag.Var(np.ones((1, 2))), w)
            assert not tape.records and not y.requires_grad


class TestLosses:
    def test_mse_examples(self):
        a = build(2, (4, 4), 1, [((0, 0), [1.0])])
        assert ag.mse_loss(a, a) == 0.0
        assert ag.mse_loss(a, a.with_features(np.zeros((1, 1)))) == 1.0

    def test_mse_errors(self, rng):
        a = build(2, (4, 4), 1, [((0, 0), [1.0])])
        with pytest.raises(PatternMismatch):
            ag.mse_loss(a, build(2, (4, 4), 1, [((0, 1), [1.0])]))
        with pytest.raises(EmptyInput):
            ag.mse_loss(build(2, (4, 4), 1, []), build(2, (4, 4), 1, []))

    def test_mse_scalar_loop(self, rng):
        for _ in range(50):
            x = random_tensor(rng, 2, 6, 3)
            y = x.with_features(rng.standard_normal(x.features.shape))
            assert abs(ag.mse_loss(x, y) - oracles.mse_loop(x.features, y.features)) <= 1e-12

    def test_sparsifier_examples(self):
        rec = L.SparsifierRecord(0, np.array([2.0]), np.array([]))
        assert ag.sparsifier_loss(rec) == 0.0
        assert ag.sparsifier_loss(L.SparsifierRecord(0, np.array([0.0]), np.array([0.0]))) == 2.0
        assert ag.sparsifier_loss(L.SparsifierRecord(0, np.array([1.0]), np.array([-1.0]))) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), max_size=20), st.lists(st.floats(-5, 5), max_size=20))
    def test_sparsifier_loop(self, fp, fn):
        rec = L.SparsifierRecord(0, np.array(fp), np.array(fn))
        assert abs(ag.sparsifier_loss(rec) - oracles.hinge_loop(fp, fn)) <= 1e-12

    def test_hierarchical(self, rng):
        x = random_tensor(rng, 2, 6, 1)
        recs = [L.SparsifierRecord(i, rng.standard_normal(4), rng.standard_normal(3)) for i in range(3)]
        rep = ag.hierarchical_loss(x, x, recs)
        assert rep.total == pytest.approx(sum(v for _, v in rep.sparsifier_losses))
        assert rep.term_weights == [1.0] * 4
        y = x.with_features(x.features + 1)
        mono = ag.hierarchical_loss(x, y, recs, monochrome=True)
        assert mono.mse == 0.0 and mono.total == pytest.approx(rep.total)
        w = ag.hierarchical_loss(x, y, recs, weights=[2.0, 0.0, 1.0, 3.0])
        sp = [ag.sparsifier_loss(r) for r in recs]
        assert w.total == pytest.approx(2 * ag.mse_loss(x, y) + sp[1] + 3 * sp[2])
        perfect = [L.SparsifierRecord(0, np.array([1.5]), np.array([-1.0]))]
        assert ag.hierarchical_loss(x, x, perfect).total == 0.0

    def test_log_fields(self):
        rep = ag.LossReport(0.5, [(2, 1.25), (1, 0.0)], 1.75)
        assert rep.log_fields() == "loss=1.75 mse=0.5 sp0=1.25 sp1=0"


class TestOptimizer:
    @pytest.mark.parametrize("kind,lr", [("adam", 0.05), ("sgd", 0.01)])
    def test_quadratic_bowl(self, kind, lr):
        p = ag.param(np.array([3.0, -2.0]))
        opt = ag.Optimizer({"p": p}, ag.OptimizerConfig(kind=kind, lr=lr))
        for _ in range(1000):
            p.grad = 2 * (p.value - np.array([1.0, 0.5]))
            opt.step()
        assert np.abs(p.value - [1.0, 0.5]).max() < 1e-3

    def test_zero_grad_and_zero_lr(self):
        p = ag.param(np.array([1.0, 2.0]))
        out = ag.optimizer_step({"p": p}, {"p": np.zeros(2)})
        assert out["p"].tolist() == [1.0, 2.0]
        out = ag.optimizer_step({"p": p}, {"p": np.ones(2)}, ag.OptimizerConfig(lr=0.0))
        assert out["p"].tolist() == [1.0, 2.0]

    def test_state_round_trip(self):
        p = ag.param(np.array([1.0]))
        opt = ag.Optimizer({"p": p})
        p.grad = np.array([0.3])
        opt.step()
        other = ag.Optimizer({"p": ag.param(np.array([1.0]))})
        other.load_state_tensors(opt.state_tensors(), opt.t)
        assert other.t == 1 and other.m["p"].tolist() == opt.m["p"].tolist()


class TestNetworkGradients:
    @pytest.mark.parametrize("block", ["single", "residual"])
    def test_small_autoencoder(self, block):
        model, x = gradcheck.autoencoder_case(d=2, size=8, k=2, block=block)
        results, loss = gradcheck.check(model, x)
        n, bad, worst = gradcheck.summarize(results, loss)
        assert n == model.parameter_count()
        assert bad == 0, worst

    def test_d3_autoencoder(self):
        model, x = gradcheck.autoencoder_case(d=3, size=4, k=1)
        results, loss = gradcheck.check(model, x)
        assert gradcheck.summarize(results, loss)[1] == 0

    def test_sparsifier_gradient_locality(self):
        """With the MSE weight at 0, layers after the last Sparsify get no gradient."""
        from sparseae.nn import Context

        model, x = gradcheck.autoencoder_case(d=2, size=8, k=2)
        with ag.Tape() as tape:
            total, _, _ = model.loss(x, Context(update_bn=False), weights=[0.0, 1.0, 1.0])
            tape.backward(total)
        last = model.decoder.stages[-1].post
        for p in list(last.parameters().values()) + list(model.decoder.output.parameters().values()):
            assert p.grad is None or not p.grad.any()
