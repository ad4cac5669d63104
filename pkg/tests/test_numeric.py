import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jim import numeric
from jim.numeric import (
    DenseLayer,
    DimensionError,
    GruCell,
    NumericError,
    Parameter,
    ParameterError,
    RmsProp,
    categorical_kl,
    finite_diff_gradcheck,
    load_parameter_blocks,
    one_hot,
    save_parameter_blocks,
    softmax,
)


class TestDenseLayer:
    def test_identity_weights(self):
        layer = DenseLayer("fc", 2, 2, "identity")
        layer.w.value[...] = np.eye(2)
        y, _ = layer.forward(np.array([1.0, 2.0]))
        np.testing.assert_allclose(y, [1.0, 2.0])

    def test_zero_weights_bias_only(self):
        layer = DenseLayer("fc", 3, 1, "identity")
        layer.b.value[...] = [3.0]
        y, _ = layer.forward(np.array([5.0, -1.0, 2.0]))
        np.testing.assert_allclose(y, [3.0])

    def test_relu_hand_case(self):
        # relu(-1 * 2 + 1) = relu(-1) = 0
        layer = DenseLayer("fc", 1, 1, "relu")
        layer.w.value[...] = [[2.0]]
        layer.b.value[...] = [1.0]
        y, _ = layer.forward(np.array([-1.0]))
        np.testing.assert_allclose(y, [0.0])

    def test_shape_mismatch(self):
        layer = DenseLayer("fc", 2, 2)
        with pytest.raises(DimensionError):
            layer.forward(np.zeros(3))

    def test_batched_backward_matches_fd(self):
        rng = np.random.default_rng(3)
        layer = DenseLayer("fc", 4, 3, "tanh", rng=rng)
        x = rng.normal(size=(5, 4))
        target = rng.normal(size=(5, 3))

        def loss():
            y, _ = layer.forward(x)
            return float(((y - target) ** 2).sum())

        y, cache = layer.forward(x)
        layer.w.zero_grad()
        layer.b.zero_grad()
        layer.backward(cache, 2.0 * (y - target))
        report = finite_diff_gradcheck(loss, layer.parameters())
        assert report.passed, report.lines()


class TestGruCell:
    def test_zero_everything(self):
        cell = GruCell("gru", 2, 3)
        h, _ = cell.forward(np.zeros(2), np.zeros(3))
        np.testing.assert_allclose(h, np.zeros(3))

    def test_zero_params_half_decay(self):
        # update gate sigmoid(0) = 0.5, candidate tanh(0) = 0
        cell = GruCell("gru", 1, 1)
        h, _ = cell.forward(np.zeros(1), np.array([1.0]))
        np.testing.assert_allclose(h, [0.5])

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        cell = GruCell("gru", 3, 4, rng=rng)
        xs = rng.normal(size=(6, 2, 3))  # 6 steps, batch 2
        h0 = rng.normal(size=(2, 4))
        target = rng.normal(size=(2, 4))

        def run():
            h = h0
            caches = []
            for t in range(xs.shape[0]):
                h, c = cell.forward(xs[t], h)
                caches.append(c)
            return h, caches

        def loss():
            h, _ = run()
            return float(((h - target) ** 2).sum())

        h, caches = run()
        for p in cell.parameters():
            p.zero_grad()
        dh = 2.0 * (h - target)
        for c in reversed(caches):
            _, dh = cell.backward(c, dh)
        report = finite_diff_gradcheck(loss, cell.parameters(), max_entries_per_block=40)
        assert report.passed, report.lines()

    def test_dim_error(self):
        cell = GruCell("gru", 2, 3)
        with pytest.raises(DimensionError):
            cell.forward(np.zeros(5), np.zeros(3))

    def test_gate_blocks_views(self):
        cell = GruCell("gru", 2, 3)
        gates = cell.gate_blocks()
        assert set(gates) == {"update", "reset", "candidate"}
        gates["update"][0][...] = 1.0
        assert np.all(cell.wx.value[:, :3] == 1.0)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_closed_form(self):
        p = softmax(np.array([math.log(2.0), 0.0]))
        np.testing.assert_allclose(p, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_large_logits_no_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)

    def test_temperature_validation(self):
        with pytest.raises(ParameterError):
            softmax(np.zeros(3), temperature=0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=24),
           st.floats(min_value=1e-3, max_value=1e3))
    def test_valid_distribution_property(self, logits, temp):
        p = softmax(np.array(logits), temperature=temp)
        assert np.all(p >= 0.0)
        assert abs(p.sum() - 1.0) <= 1e-12


class TestCategoricalKl:
    def test_identity_zero(self):
        assert categorical_kl([0.3, 0.7], [0.3, 0.7]) == 0.0

    def test_one_hot_vs_uniform(self):
        assert categorical_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))

    def test_closed_form(self):
        val = categorical_kl([0.5, 0.5], [0.9, 0.1])
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert val == pytest.approx(expected, abs=1e-12)
        assert val == pytest.approx(0.5108, abs=1e-4)

    def test_support_mismatch(self):
        with pytest.raises(DimensionError):
            categorical_kl([0.5, 0.5], [1.0, 0.0, 0.0])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=12),
           st.lists(st.floats(min_value=1e-6, max_value=1.0), min_size=2, max_size=12))
    def test_nonnegative_property(self, a, b):
        k = min(len(a), len(b))
        p = np.array(a[:k]) / np.sum(a[:k])
        q = np.array(b[:k]) / np.sum(b[:k])
        assert categorical_kl(p, q) >= 0.0

    def test_batched(self):
        p = np.array([[1.0, 0.0], [0.5, 0.5]])
        q = np.array([[0.5, 0.5], [0.5, 0.5]])
        out = categorical_kl(p, q)
        np.testing.assert_allclose(out, [math.log(2.0), 0.0])


class TestRmsProp:
    def test_zero_gradient_is_fixed_point(self):
        p = Parameter("p", np.array([1.0, -2.0]))
        opt = RmsProp([p], lr=0.1)
        before = p.value.copy()
        opt.step()
        np.testing.assert_array_equal(p.value, before)

    def test_hand_step(self):
        # decay=0, acc=0, g=2, eps=0: step = -lr * g / |g| = -0.1
        p = Parameter("p", np.array([0.0]))
        opt = RmsProp([p], lr=0.1, decay=0.0, eps_stability=0.0)
        p.grad[...] = 2.0
        opt.step()
        np.testing.assert_allclose(p.value, [-0.1])

    def test_accumulator_shrinks_repeat_step(self):
        p = Parameter("p", np.array([0.0]))
        opt = RmsProp([p], lr=0.1, decay=0.99, eps_stability=0.0)
        p.grad[...] = 2.0
        opt.step()
        first = abs(p.value[0])
        prev = p.value[0]
        p.grad[...] = 2.0
        opt.step()
        second = abs(p.value[0] - prev)
        assert second < first
        assert np.all(opt._acc[0] >= 0.0)

    def test_nan_gradient_raises_with_path(self):
        p = Parameter("net.layer.w", np.zeros(2))
        opt = RmsProp([p])
        p.grad[...] = np.nan
        with pytest.raises(NumericError, match="net.layer.w"):
            opt.step()


class TestGradCheck:
    def test_quadratic(self):
        p = Parameter("x", np.array([3.0]))

        def loss():
            return float(p.value[0] ** 2)

        p.grad[...] = 2.0 * p.value
        report = finite_diff_gradcheck(loss, [p])
        assert report.passed
        assert report.blocks[0].max_rel_err < 1e-6

    def test_corrupted_backward_fails(self):
        rng = np.random.default_rng(5)
        layer = DenseLayer("fc", 3, 2, "tanh", rng=rng)
        x = rng.normal(size=(4, 3))

        def loss():
            y, _ = layer.forward(x)
            return float((y ** 2).sum())

        y, cache = layer.forward(x)
        layer.backward(cache, 2.0 * y)
        layer.w.grad *= 1.5  # deliberate corruption
        report = finite_diff_gradcheck(loss, [layer.w])
        assert not report.passed

    def test_report_lines(self):
        p = Parameter("x", np.array([1.0]))
        p.grad[...] = 2.0

        def loss():
            return float(p.value[0] ** 2)

        report = finite_diff_gradcheck(loss, [p])
        assert any("x" in line for line in report.lines())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        blocks = {
            "net.fc.w": rng.normal(size=(3, 4)),
            "net.fc.b": rng.normal(size=4),
            "scalar": np.array(2.5),
        }
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_parameter_blocks(p1, blocks, meta={"seed": "7"})
        loaded, meta = load_parameter_blocks(p1)
        assert meta == {"seed": "7"}
        for k, v in blocks.items():
            np.testing.assert_array_equal(loaded[k], v)
        save_parameter_blocks(p2, loaded, meta=meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_into_parameters(self, tmp_path):
        p = Parameter("a", np.array([1.0, 2.0]))
        save_parameter_blocks(tmp_path / "c.ckpt", [p])
        p.value[...] = 0.0
        numeric.load_into_parameters(tmp_path / "c.ckpt", [p])
        np.testing.assert_allclose(p.value, [1.0, 2.0])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_parameter_blocks(path)


class TestOneHot:
    def test_basic(self):
        np.testing.assert_array_equal(
            one_hot([1, 0], 3), [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

    def test_negative_index_gives_zero_row(self):
        np.testing.assert_array_equal(one_hot([-1, 2], 3),
                                      [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
