"""Tape mechanics and gradient correctness against the finite-difference oracle."""
import math

import numpy as np
import pytest

from kban import tensor as T
from kban.tensor import ShapeError, Tape, Tensor

from gradcheck import check_gradients


def test_backward_of_sum_is_all_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = T.relu(x)
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(out)


def test_gradient_accumulates_over_multiple_uses():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        # loss = x*x + 3x -> d/dx = 2x + 3 = 7
        loss = T.sum_all(T.add(T.mul(x, x), T.scale(x, 3.0)))
        tape.backward(loss)
    assert x.grad[0] == pytest.approx(7.0, abs=1e-12)


def test_tape_nodes_are_topologically_ordered():
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape() as tape:
        y = T.relu(x)
        z = T.sigmoid(y)
        T.sum_all(T.mul(y, z))
    seen: set[int] = {id(x)}
    for out, inputs, _ in tape.nodes:
        for inp in inputs:
            assert not inp.requires_grad or id(inp) in seen
        seen.add(id(out))


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    out = T.sigmoid(x)  # inference mode: forward only
    assert out.requires_grad
    with Tape() as tape:
        pass
    assert tape.nodes == []


def test_mean_all_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        tape.backward(T.mean_all(x))
    assert np.allclose(x.grad, 0.25)


@pytest.mark.parametrize("seed", range(5))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 4)) * 0.5, requires_grad=True)
    b = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    v = Tensor(rng.standard_normal((3, 2)), requires_grad=True)

    def f() -> Tensor:
        h = T.relu(T.affine(x, w, b))
        att = T.sigmoid(T.scale(T.matmul(h, T.transpose(h)), 1.0 / math.sqrt(4)))
        pooled = T.max_pool_axis1(T.broadcast_expand_mul(att, v))
        sm = T.softmax_rows(pooled)
        return T.mean_all(T.mul(sm, sm))

    check_gradients(f, [("x", x), ("w", w), ("b", b), ("v", v)])


@pytest.mark.parametrize("seed", range(3))
def test_bce_and_layernorm_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    x = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    gain = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    bias = Tensor(rng.standard_normal(6) * 0.2, requires_grad=True)
    target = Tensor((rng.random((2, 6)) > 0.5).astype(float))

    def f() -> Tensor:
        return T.bce(T.sigmoid(T.layer_norm_rows(x, gain, bias)), target)

    check_gradients(f, [("x", x), ("gain", gain), ("bias", bias)])


@pytest.mark.parametrize("seed", range(3))
def test_conv_stack_matches_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    img = Tensor(rng.standard_normal((2, 7, 7)), requires_grad=True)
    k1 = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True)
    k2 = Tensor(rng.standard_normal((2, 3, 2, 2)) * 0.3, requires_grad=True)

    def f() -> Tensor:
        h = T.relu(T.conv2d(img, k1, stride=2))
        return T.mean_all(T.conv2d(h, k2, stride=1))

    check_gradients(f, [("img", img), ("k1", k1), ("k2", k2)])


def test_gradients_in_separate_tapes_are_independent():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum_all(T.mul(x, x)))
    first = x.grad.copy()
    x.grad = None
    with Tape() as tape:
        tape.backward(T.sum_all(T.mul(x, x)))
    assert np.array_equal(first, x.grad)
