import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colam.nn import (Batch, Layer, Network, NonFiniteGradient, OptimizerState, ShapeError, cross_entropy_soft,
                      entropy, grad_check, load_params, save_params, sgd_step, softmax_tempered, tempered_loss)

logit_vectors = arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50))


def random_batch(rng, n, d, c, soft=False):
    x = rng.standard_normal((n, d))
    if soft:
        y = rng.random((n, c))
        y /= y.sum(axis=1, keepdims=True)
    else:
        y = np.eye(c)[rng.integers(0, c, size=n)]
    return Batch(x, y)


class TestSoftmax:
    def test_uniform_for_constant_logits(self):
        for T in (0.1, 1.0, 7.0):
            np.testing.assert_allclose(softmax_tempered([0.0, 0.0, 0.0], T), [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(softmax_tempered([math.log(2), 0.0], 1.0), [2 / 3, 1 / 3], atol=1e-15)

    def test_temperature_rescales(self):
        # mpmath: e/(e+1) = 0.731058578630004879...
        p = softmax_tempered([3.0, 0.0], 3.0)
        np.testing.assert_allclose(p, [0.7310585786300049, 0.2689414213699951], atol=1e-15)
        np.testing.assert_allclose(p, softmax_tempered([1.0, 0.0], 1.0), atol=1e-15)

    def test_large_logits_are_stable(self):
        p = softmax_tempered([700.0, -700.0, 0.0], 1.0)
        assert np.isfinite(p).all()
        np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-300)

    @pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 1.0]])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError):
            softmax_tempered(bad, 1.0)

    @pytest.mark.parametrize("T", [0.0, -1.0, np.inf])
    def test_rejects_bad_temperature(self, T):
        with pytest.raises(ValueError):
            softmax_tempered([1.0, 2.0], T)

    @pytest.mark.invariant
    @settings(max_examples=200, deadline=None)
    @given(z=logit_vectors, T=st.sampled_from([0.1, 1.0, 10.0]))
    def test_sums_to_one(self, z, T):
        p = softmax_tempered(z, T)
        assert (p >= 0).all()
        assert abs(p.sum() - 1.0) < 1e-12

    @pytest.mark.invariant
    @settings(max_examples=200, deadline=None)
    @given(z=logit_vectors)
    def test_entropy_nondecreasing_in_temperature(self, z):
        grid = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 10.0, 100.0]
        h = [float(entropy(softmax_tempered(z, T))) for T in grid]
        assert all(b >= a - 1e-12 for a, b in zip(h, h[1:]))
        if np.ptp(z) == 0:
            np.testing.assert_allclose(h, math.log(len(z)), atol=1e-12)


class TestCrossEntropy:
    def test_half_on_hot_class(self):
        assert cross_entropy_soft([0, 1, 0], [0.25, 0.5, 0.25]) == pytest.approx(math.log(2), abs=1e-15)

    def test_uniform(self):
        assert cross_entropy_soft([0.25] * 4, [0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)

    def test_soft_pair(self):
        # mpmath: -0.9 ln 0.8 - 0.1 ln 0.2 = 0.36177298742619881765
        assert cross_entropy_soft([0.9, 0.1], [0.8, 0.2]) == pytest.approx(0.3617729874261988, abs=1e-15)

    def test_clamps_zero_probability(self):
        assert cross_entropy_soft([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy_soft([1.0, 0.0], [0.5, 0.25, 0.25])


class TestTemperedLoss:
    def test_zero_final_layer_gives_log_c(self, rng):
        net = Network.init([5, 7, 4], rng)
        net.layers[-1].weight[:] = 0
        for soft in (False, True):
            loss, _ = tempered_loss(net, random_batch(rng, 6, 5, 4, soft), 1.5)
            assert loss == pytest.approx(math.log(4), abs=1e-12)

    @pytest.mark.invariant
    @pytest.mark.parametrize("T", [1.0, 1.5, 3.0])
    def test_gradient_matches_finite_differences(self, rng, T):
        net = Network.init([6, 10, 3], rng)
        for layer in net.layers:
            layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
        report = grad_check(net, random_batch(rng, 8, 6, 3, soft=True), T, step=1e-5, tolerance=1e-4)
        assert report.passed, report

    def test_confidence_penalty_gradient(self, rng):
        net = Network.init([4, 8, 3], rng)
        batch = random_batch(rng, 8, 4, 3)
        loss_fn = lambda n: tempered_loss(n, batch, 1.5, confidence_beta=0.3)
        _, grads = loss_fn(net)
        flat = net.layers[0].weight.reshape(-1)
        for j in range(0, flat.size, 5):
            orig = flat[j]
            flat[j] = orig + 1e-5
            up = loss_fn(net)[0]
            flat[j] = orig - 1e-5
            down = loss_fn(net)[0]
            flat[j] = orig
            num = (up - down) / 2e-5
            assert abs(num - grads[0].reshape(-1)[j]) <= 1e-6 * max(1.0, abs(num))

    def test_hotter_temperature_never_increases_loss_on_uniform_targets(self, rng):
        net = Network.init([5, 9, 4], rng)
        x = 3 * rng.standard_normal((16, 5))
        batch = Batch(x, np.full((16, 4), 0.25))
        losses = [tempered_loss(net, batch, T)[0] for T in (0.25, 0.5, 1, 2, 4, 8)]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    @pytest.mark.invariant
    def test_hard_targets_at_unit_temperature_equal_plain_cross_entropy(self, rng):
        net = Network.init([5, 9, 4], rng)
        batch = random_batch(rng, 10, 5, 4)
        loss, _ = tempered_loss(net, batch, 1.0)
        p = softmax_tempered(net.forward(batch.x), 1.0)
        expected = np.mean([-np.log(p[i, batch.y[i].argmax()]) for i in range(len(batch))])
        assert loss == expected

    def test_class_count_mismatch(self, rng):
        net = Network.init([5, 4], rng)
        with pytest.raises(ShapeError):
            tempered_loss(net, random_batch(rng, 3, 5, 3), 1.0)


class TestBatch:
    def test_rejects_bad_targets(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((2, 3)), [[0.5, 0.6], [1.0, 0.0]])
        with pytest.raises(ValueError):
            Batch(np.zeros((1, 3)), [[1.5, -0.5]])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Batch(np.zeros((0, 3)), np.zeros((0, 2)))


class TestSGD:
    def _scalar_net(self, p0):
        return Network([Layer(np.array([[p0]]), np.array([0.0]))])

    def test_zero_gradient_is_noop(self, rng):
        net = Network.init([3, 4, 2], rng)
        before = [p.copy() for p in net.parameters()]
        opt = OptimizerState.for_network(net, lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step(net, [np.zeros_like(p) for p in net.parameters()], opt)
        assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))

    def test_pure_decay(self, rng):
        net = Network.init([3, 4, 2], rng)
        before = [p.copy() for p in net.parameters()]
        opt = OptimizerState.for_network(net, lr=1.0, momentum=0.0, weight_decay=0.1)
        sgd_step(net, [np.zeros_like(p) for p in net.parameters()], opt)
        for a, b in zip(before, net.parameters()):
            np.testing.assert_allclose(b, 0.9 * a, rtol=1e-15)

    def test_momentum_recurrence(self):
        net = self._scalar_net(1.0)
        opt = OptimizerState.for_network(net, lr=0.1, momentum=0.9, weight_decay=0.0)
        grads = [np.array([[1.0]]), np.array([0.0])]
        sgd_step(net, grads, opt)
        sgd_step(net, grads, opt)
        assert net.layers[0].weight[0, 0] == pytest.approx(0.71, abs=1e-15)

    def test_non_finite_gradient_names_layer(self, rng):
        net = Network.init([3, 4, 2], rng)
        grads = [np.zeros_like(p) for p in net.parameters()]
        grads[2][0, 0] = np.nan
        opt = OptimizerState.for_network(net, lr=0.1)
        with pytest.raises(NonFiniteGradient) as exc:
            sgd_step(net, grads, opt)
        assert exc.value.layer == 1

    def test_velocity_buffers_match_parameters(self, rng):
        net = Network.init([3, 4, 2], rng)
        opt = OptimizerState.for_network(net, lr=0.1)
        assert [v.shape for v in opt.velocity] == [p.shape for p in net.parameters()]
        assert all((v == 0).all() for v in opt.velocity)


class TestGradCheck:
    def test_linear_network(self, rng):
        net = Network.init([4, 3], rng)
        report = grad_check(net, random_batch(rng, 8, 4, 3, soft=True), 1.0)
        assert report.max_rel_error < 1e-6

    def test_empty_batch_is_rejected(self, rng):
        with pytest.raises(ValueError):
            Batch(np.zeros((0, 4)), np.zeros((0, 3)))

    def test_corrupted_gradient_is_flagged(self, rng):
        net = Network.init([4, 5, 3], rng)
        batch = random_batch(rng, 8, 4, 3)
        _, grads = tempered_loss(net, batch, 1.0)
        grads = [g.copy() for g in grads]
        grads[2].reshape(-1)[7] += 1.0
        report = grad_check(net, batch, 1.0, grads=grads)
        assert not report.passed
        assert report.worst_index == (2, 7)

    def test_parameter_budget(self, rng):
        net = Network.init([100, 100, 3], rng)
        with pytest.raises(ValueError):
            grad_check(net, random_batch(rng, 2, 100, 3))


class TestNetwork:
    def test_shapes_must_compose(self):
        with pytest.raises(ShapeError):
            Network([Layer(np.zeros((4, 3)), np.zeros(4)), Layer(np.zeros((2, 5)), np.zeros(2))])

    def test_penultimate_feeds_final_layer(self, rng):
        net = Network.init([5, 6, 7, 3], rng)
        x = rng.standard_normal((4, 5))
        h = net.penultimate(x)
        np.testing.assert_allclose(h @ net.layers[-1].weight.T + net.layers[-1].bias, net.forward(x), rtol=1e-14)

    def test_checkpoint_round_trip(self, rng, tmp_path):
        net = Network.init([5, 6, 3], rng)
        save_params(tmp_path / "p.bin", net, {"seed": 1, "epoch": 2, "config_hash": "abc"})
        back = load_params(tmp_path / "p.bin")
        assert all(np.array_equal(a, b) for a, b in zip(net.parameters(), back.parameters()))
        raw = (tmp_path / "p.bin").read_bytes()
        assert raw[:4] == b"CLNN"
        assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 2
        assert (tmp_path / "p.json").is_file()

    def test_checkpoint_bad_magic(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            load_params(tmp_path / "p.bin")
