import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_difference
from ctrlfl.errors import ContractError, ShapeError
from ctrlfl.tensor_core import (
    AdamState,
    ParamSet,
    Partition,
    Tensor,
    adam_step,
    cross_entropy,
    deserialize_params,
    layer_norm,
    matmul,
    mul,
    no_grad,
    serialize_params,
    softmax_rows,
    topological_order,
    total,
)
from ctrlfl.errors import ProtocolError


def triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_projector(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_direct_formula(self):
        row = np.array([1.0, 2.0, 3.0])
        direct = np.exp(row) / np.exp(row).sum()
        np.testing.assert_allclose(softmax_rows(Tensor([row])).data[0], direct, atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(FloatingPointError):
            softmax_rows(Tensor([[np.nan, 1.0]]))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        y = softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
        assert (y >= 0).all() and (y <= 1).all()


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        out = layer_norm(Tensor([[4.0, 4.0, 4.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, np.zeros((1, 3)))

    def test_two_values(self):
        # mean 2, std 1
        out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_zero_gain_gives_bias(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        b = np.arange(5.0)
        out = layer_norm(Tensor(x), Tensor(np.zeros(5)), Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (4, 5)))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 9)),
                  elements=st.floats(-1e3, 1e3)))
    def test_pre_affine_mean_is_zero(self, x):
        d = x.shape[1]
        out = layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
        assert np.abs(out.mean(axis=1)).max() < 1e-7


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-15)

    def test_certain(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 1e9
        assert cross_entropy(Tensor(logits), [1]).item() == pytest.approx(0.0, abs=1e-12)

    def test_log_sum_exp_oracle(self):
        rng = np.random.default_rng(11)
        z = rng.normal(size=(2, 3))
        t = [2, 0]
        expected = np.mean([math.log(sum(math.exp(v) for v in row)) - row[k] for row, k in zip(z, t)])
        assert cross_entropy(Tensor(z), t).item() == pytest.approx(expected, abs=1e-9)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_ignored_targets_do_not_count(self):
        z = np.random.default_rng(1).normal(size=(3, 4))
        full = cross_entropy(Tensor(z[:2]), [1, 2]).item()
        assert cross_entropy(Tensor(z), [1, 2, 0], ignore_index=0).item() == pytest.approx(full, abs=1e-15)


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
        total(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 2)))

    def test_half_square(self):
        w = Tensor(np.random.default_rng(1).normal(size=(4,)), requires_grad=True)
        (total(mul(w, w)) * 0.5).backward()
        np.testing.assert_allclose(w.grad, w.data, atol=1e-15)

    def test_non_scalar_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_reverse_topological_order(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = a * 2.0
        c = b + a
        d = total(c * b)
        order = topological_order(d)
        pos = {id(n): i for i, n in enumerate(order)}
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        assert order[-1] is d

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = w * 3.0
        assert not out.requires_grad

    def test_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 3, 4)))
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=5) + 1.0, requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        targets = rng.integers(0, 5, size=6)

        def loss_value():
            with no_grad():
                h = layer_norm(x @ w, g, b)
                return cross_entropy(h, targets).item()

        loss = cross_entropy(layer_norm(x @ w, g, b), targets)
        loss.backward()
        for t in (w, g, b):
            num = central_difference(loss_value, t.data)
            rel = np.abs(t.grad - num) / np.maximum(np.maximum(np.abs(t.grad), np.abs(num)), 1e-6)
            assert rel.max() < 1e-4


def _paramset(rng):
    ps = ParamSet()
    ps.add("base.w", Tensor(rng.normal(size=(3, 3)), requires_grad=True), Partition.BASE)
    ps.add("ctrl.w", Tensor(rng.normal(size=(3,)), requires_grad=True), Partition.CONTROLLER)
    ps.add("embed", Tensor(rng.normal(size=(4, 3)), requires_grad=True), Partition.EMBEDDING)
    return ps


class TestAdam:
    def test_empty_mask_leaves_params(self):
        ps = _paramset(np.random.default_rng(0))
        before = ps.snapshot()
        for t in ps._tensors.values():
            t.grad = np.ones_like(t.data)
        state = AdamState()
        adam_step(ps, state, lambda n, lab: False)
        for name, arr in before.items():
            assert ps[name].data.tobytes() == arr.tobytes()
        assert state.step_count == 1

    def test_first_step_magnitude_is_lr(self):
        # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        ps = ParamSet()
        w = ps.add("w", Tensor(np.zeros(1), requires_grad=True), Partition.CONTROLLER)
        w.grad = np.ones(1)
        adam_step(ps, AdamState(learning_rate=0.1))
        assert w.data[0] == pytest.approx(-0.1, abs=1e-9)

    def test_frozen_base_checksums_after_100_steps(self):
        rng = np.random.default_rng(2)
        ps = _paramset(rng)
        before = ps.checksums()
        state = AdamState()
        for _ in range(100):
            for t in ps._tensors.values():
                t.grad = rng.normal(size=t.shape)
            adam_step(ps, state, lambda n, lab: lab is Partition.CONTROLLER)
        after = ps.checksums()
        assert after["base.w"] == before["base.w"] and after["embed"] == before["embed"]
        assert after["ctrl.w"] != before["ctrl.w"]
        assert state.step_count == 100

    def test_missing_gradient_is_contract_error(self):
        ps = _paramset(np.random.default_rng(0))
        with pytest.raises(ContractError):
            adam_step(ps, AdamState(), ["ctrl.w"])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(9)
            ps = _paramset(rng)
            state = AdamState()
            for _ in range(20):
                for t in ps._tensors.values():
                    t.grad = rng.normal(size=t.shape)
                adam_step(ps, state)
            return ps.checksums()
        assert run() == run()


class TestSerialization:
    def test_round_trip(self):
        ps = _paramset(np.random.default_rng(4))
        blob = serialize_params(ps, {"round": 3})
        frame = deserialize_params(blob)
        assert frame.meta == {"round": 3}
        assert frame.param_count == 9 + 3 + 12
        assert frame.payload_bytes == 8 * frame.param_count
        assert frame.header_bytes + frame.payload_bytes == len(blob)
        for name, t in ps.items():
            assert frame.arrays[name].tobytes() == t.data.tobytes()
            assert frame.labels[name] is ps.label(name)

    def test_values_are_little_endian_float64(self):
        ps = ParamSet()
        ps.add("x", Tensor([1.5, -2.0]), Partition.BASE)
        blob = serialize_params(ps)
        assert blob[-16:] == np.array([1.5, -2.0], dtype="<f8").tobytes()

    def test_deterministic_bytes(self):
        a = serialize_params(_paramset(np.random.default_rng(1)), {"b": 1, "a": 2})
        b = serialize_params(_paramset(np.random.default_rng(1)), {"a": 2, "b": 1})
        assert a == b

    @pytest.mark.parametrize("cut", [3, 20, -1])
    def test_truncated_frames_rejected(self, cut):
        blob = serialize_params(_paramset(np.random.default_rng(1)))
        with pytest.raises(ProtocolError):
            deserialize_params(blob[:cut])
