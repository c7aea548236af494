import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rgaekit import tensor as T
from rgaekit.gradcheck import check_primitives, default_model
from rgaekit.task import SyntheticTask


def test_matmul_hand_arithmetic():
    out = T.matmul(T.Tensor([[1, 2], [3, 4]]), T.Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_softmax_symmetric_and_closed_form():
    np.testing.assert_array_equal(T.softmax(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    # exp(ln 1) / (1 + 3), exp(ln 3) / (1 + 3)
    out = T.softmax(T.Tensor([math.log(1.0), math.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_mask_gives_exact_zeros():
    mask = np.triu(np.ones((3, 3), dtype=bool), k=1)
    out = T.softmax(T.Tensor(np.random.default_rng(0).normal(size=(3, 3))), mask).data
    assert np.all(out[mask] == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_stochastic(x):
    out = T.softmax(T.Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_square_gradient():
    rec = T.Record(lambda x: {"y": x * x})
    rec.forward({"x": 3.0})
    assert rec.backward("y")["x"] == pytest.approx(6.0, abs=0)


def test_sum_of_softmax_has_zero_gradient():
    rec = T.Record(lambda x: {"y": T.softmax(x).sum()})
    rec.forward({"x": [0.3, -1.2, 2.0]})
    np.testing.assert_allclose(rec.backward("y")["x"], 0.0, atol=1e-15)


def test_backward_errors():
    rec = T.Record(lambda x: {"y": x * 2.0})
    with pytest.raises(RuntimeError, match="before forward"):
        rec.backward("y")
    rec.forward({"x": [1.0, 2.0]})
    with pytest.raises(T.ShapeError, match="scalar"):
        rec.backward("y")


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError, match="add"):
        T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))


def test_unused_input_gets_exact_zero_gradient():
    rec = T.Record(lambda a, b: {"y": (a * a).sum(), "z": b.sum()})
    rec.forward({"a": [1.0, 2.0], "b": [3.0, 4.0]})
    grads = rec.backward("y")
    np.testing.assert_array_equal(grads["b"], [0.0, 0.0])
    assert grads["a"].shape == (2,)


def test_finite_diff_linear_and_cubic():
    w = np.array([[1.5, -2.0], [0.25, 3.0]])
    lin = T.Record(lambda x: {"y": (x @ T.Tensor(w)).sum()})
    for h in (1e-3, 1e-5, 1e-1):
        assert T.finite_diff_check(lin, "y", "x", h, inputs={"x": [[0.3, -0.7]]}) < 1e-10
    cube = T.Record(lambda x: {"y": (x * x * x).sum()})
    assert T.finite_diff_check(cube, "y", "x", 1e-5, inputs={"x": [1.0]}) < 1e-8


@pytest.mark.parametrize("seed", range(4))
def test_every_primitive_matches_central_differences(seed):
    errors = check_primitives(seed)
    assert max(errors.values()) < 1e-6, errors


def test_tap_gradient_equals_cut_graph_gradient():
    rng = np.random.default_rng(1)
    x0, v0 = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))

    def fn(x, v):
        a = T.tap("a", T.softmax(x))
        return {"y": ((a @ v) * (a @ v)).sum()}

    rec = T.Record(fn)
    rec.forward({"x": x0, "v": v0})
    tapped = rec.backward("y")["a"]

    cut = T.Record(lambda a, v: {"y": ((a @ v) * (a @ v)).sum()})
    cut.forward({"a": T.softmax(T.Tensor(x0)).data, "v": v0})
    np.testing.assert_array_equal(tapped, cut.backward("y")["a"])


def test_tap_outside_record_is_identity():
    t = T.Tensor([1.0])
    assert T.tap("x", t) is t


def test_replay_is_bit_identical():
    model = default_model(seed=4)
    task = SyntheticTask(4)
    images, caps = task.batch(np.random.default_rng(0), 3)
    inputs, targets = task.sequences(caps)
    runs = []
    for _ in range(2):
        loss = model.loss(images, inputs, targets)
        loss.backward()
        runs.append((loss.data.copy(), model.params["decoder/b1.attn.wv"].grad.copy()))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_record_nodes_are_topologically_ordered():
    rec = T.Record(lambda x: {"y": (T.gelu(x) * x).sum()})
    rec.forward({"x": [0.5, -0.5]})
    rec.backward("y")
    seen = set()
    for node in rec.nodes:
        for p in node.parents:
            if p.requires_grad:
                assert p.node_id in seen
        seen.add(node.node_id)


def test_projector_weight_gradient_matches_to_roundoff():
    """Absolute agreement for the projector weights, whose entries are small."""
    model = default_model()
    task = SyntheticTask(4)
    images, caps = task.batch(np.random.default_rng(7), 2)
    inputs, targets = task.sequences(caps)
    p = model.params["projector/w1"]
    loss = model.loss(images, inputs, targets)
    loss.backward()
    analytic = p.grad.copy()
    h = 1e-5
    worst = 0.0
    for flat in range(0, p.data.size, 7):
        idx = np.unravel_index(flat, p.shape)
        base = p.data
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        p.data = plus
        fp = model.loss(images, inputs, targets).item()
        p.data = minus
        fm = model.loss(images, inputs, targets).item()
        p.data = base
        worst = max(worst, abs((fp - fm) / (2 * h) - analytic[idx]))
    assert worst < 1e-9
