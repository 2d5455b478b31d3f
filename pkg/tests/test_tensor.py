import math

import numpy as np
import pytest

from promptlab.tensor import (Tensor, ShapeError, add, concat, cross_entropy,
                              gather_axis0, graph_nodes, layer_norm, matmul,
                              mul, no_grad, relu, reshape, slice_axis, softmax,
                              sum_all, swap_axes, tile_leading)

from gradcheck import finite_difference, max_rel_err


def leaf(values, seed=None, shape=None):
    if seed is not None:
        values = np.random.default_rng(seed).normal(size=shape)
    return Tensor(values, requires_grad=True)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = matmul(leaf([[1.0, 0.0], [0.0, 1.0]]), leaf([[3.0], [4.0]]))
    assert out.data.tolist() == [[3.0], [4.0]]


def test_matmul_hand_value():
    out = matmul(leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(leaf(np.zeros((2, 3))), leaf(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_matmul_gradient_matches_finite_differences():
    a = leaf(None, seed=0, shape=(5, 7))
    b = leaf(None, seed=1, shape=(7, 3))
    out = sum_all(matmul(a, b))
    out.backward()
    fd_a, fd_b = finite_difference(
        lambda: float((a.data @ b.data).sum()), [a.data, b.data])
    assert max_rel_err(a.grad, fd_a) < 1e-5
    assert max_rel_err(b.grad, fd_b) < 1e-5


@pytest.mark.parametrize("shapes", [((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
def test_matmul_stacked_gradients(shapes):
    sa, sb = shapes
    a = leaf(None, seed=2, shape=sa)
    b = leaf(None, seed=3, shape=sb)
    sum_all(matmul(a, b)).backward()
    fd_a, fd_b = finite_difference(
        lambda: float((a.data @ b.data).sum()), [a.data, b.data])
    assert max_rel_err(a.grad, fd_a) < 1e-4
    assert max_rel_err(b.grad, fd_b) < 1e-4


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_symmetry():
    assert softmax(leaf([0.0, 0.0]), axis=0).data.tolist() == [0.5, 0.5]


def test_softmax_large_inputs_no_overflow():
    out = softmax(leaf([1000.0, 1000.0, 1000.0]), axis=0)
    assert np.allclose(out.data, [1 / 3] * 3)
    assert np.all(np.isfinite(out.data))


def test_softmax_against_scalar_reference():
    out = softmax(leaf([1.0, 2.0, 3.0]), axis=0)
    exps = [math.exp(v - 3.0) for v in (1.0, 2.0, 3.0)]
    expected = [e / sum(exps) for e in exps]
    assert np.abs(out.data - expected).max() < 1e-12


def test_softmax_rows_sum_to_one():
    x = leaf(None, seed=4, shape=(6, 9)) * 50.0
    out = softmax(x, axis=1)
    assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12


def test_softmax_empty_axis_raises():
    with pytest.raises(ShapeError):
        softmax(Tensor(np.zeros((3, 0))), axis=1)


def test_softmax_gradient():
    x = leaf(None, seed=5, shape=(3, 4))
    w = np.random.default_rng(6).normal(size=(3, 4))  # non-uniform weighting
    sum_all(mul(softmax(x, axis=1), Tensor(w))).backward()

    def f():
        e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
        return float((e / e.sum(axis=1, keepdims=True) * w).sum())

    (fd,) = finite_difference(f, [x.data])
    assert max_rel_err(x.grad, fd) < 1e-4


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def test_relu_values():
    assert relu(leaf([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert relu(leaf([0.0, 0.0])).data.tolist() == [0.0, 0.0]


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(7)
    values = rng.normal(size=(4, 5))
    values[np.abs(values) < 1e-3] = 0.5  # keep clear of the kink
    x = leaf(values)
    sum_all(relu(x)).backward()
    (fd,) = finite_difference(lambda: float(np.maximum(x.data, 0).sum()), [x.data])
    assert max_rel_err(x.grad, fd) < 1e-5


def test_relu_gradient_at_zero_is_zero():
    x = leaf([0.0])
    sum_all(relu(x)).backward()
    assert x.grad.tolist() == [0.0]


# ---------------------------------------------------------------------------
# concat / slice
# ---------------------------------------------------------------------------

def test_concat_prompt_plus_key_shape():
    out = concat([leaf(np.zeros((4, 8))), leaf(np.ones((10, 8)))], axis=0)
    assert out.shape == (14, 8)


def test_concat_single_part_identity():
    x = leaf([[1.0, 2.0]])
    assert concat([x], axis=0).data.tolist() == x.data.tolist()


def test_concat_gradient_is_ones_under_sum():
    parts = [leaf(np.zeros((2, 3))), leaf(np.ones((4, 3)))]
    sum_all(concat(parts, axis=0)).backward()
    for p in parts:
        assert np.array_equal(p.grad, np.ones(p.shape))


def test_concat_mismatch_raises():
    with pytest.raises(ShapeError):
        concat([leaf(np.zeros((2, 3))), leaf(np.zeros((2, 4)))], axis=0)


def test_concat_then_slice_reconstructs_exactly():
    a = leaf(None, seed=8, shape=(3, 5))
    b = leaf(None, seed=9, shape=(2, 5))
    joined = concat([a, b], axis=0)
    assert np.array_equal(slice_axis(joined, 0, 0, 3).data, a.data)
    assert np.array_equal(slice_axis(joined, 0, 3, 5).data, b.data)


def test_concat_zero_length_part_is_noop():
    a = leaf(np.zeros((0, 4)))
    b = leaf(None, seed=10, shape=(3, 4))
    assert np.array_equal(concat([a, b], axis=0).data, b.data)


def test_slice_gradient_scatters():
    x = leaf(None, seed=11, shape=(4, 3))
    sum_all(slice_axis(x, 0, 1, 3)).backward()
    expected = np.zeros((4, 3))
    expected[1:3] = 1.0
    assert np.array_equal(x.grad, expected)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    x = leaf([[5.0, 5.0, 5.0]])
    out = layer_norm(x, leaf(np.ones(3)))
    assert np.abs(out.data).max() < 1e-9


def test_layer_norm_two_point_row():
    out = layer_norm(leaf([[1.0, 3.0]]), leaf(np.ones(2)))
    assert np.abs(out.data - [[-1.0, 1.0]]).max() < 1e-3


def test_layer_norm_gradient():
    x = leaf(None, seed=12, shape=(3, 5))
    gain = leaf(None, seed=13, shape=(5,))
    w = np.random.default_rng(14).normal(size=(3, 5))
    sum_all(mul(layer_norm(x, gain), Tensor(w))).backward()

    def f():
        mu = x.data.mean(axis=-1, keepdims=True)
        var = x.data.var(axis=-1, keepdims=True)
        return float(((x.data - mu) / np.sqrt(var + 1e-6) * gain.data * w).sum())

    fd_x, fd_gain = finite_difference(f, [x.data, gain.data])
    assert max_rel_err(x.grad, fd_x) < 1e-4
    assert max_rel_err(gain.grad, fd_gain) < 1e-4


def test_layer_norm_gain_length_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(leaf(np.zeros((2, 3))), leaf(np.ones(4)))


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = cross_entropy(leaf(np.zeros((2, 4))), [1, 3], ignore_index=-1)
    assert abs(float(loss.data) - math.log(4)) < 1e-12


def test_cross_entropy_certain_prediction():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1e6
    loss = cross_entropy(leaf(logits), [2], ignore_index=-1)
    assert float(loss.data) < 1e-9


def test_cross_entropy_all_ignored_is_zero_with_zero_grad():
    x = leaf(np.ones((2, 3)))
    loss = cross_entropy(x, [9, 9], ignore_index=9)
    assert float(loss.data) == 0.0
    loss.backward()
    assert np.array_equal(x.grad, np.zeros((2, 3)))


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexError):
        cross_entropy(leaf(np.zeros((1, 3))), [3], ignore_index=-1)


def test_cross_entropy_gradient_with_ignored_rows():
    x = leaf(None, seed=15, shape=(4, 6))
    targets = np.array([2, 0, 5, 1])
    ignore = 0  # second row is masked out

    def f():
        flat = x.data
        shifted = flat - flat.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.nonzero(targets != ignore)[0]
        return float(-logp[rows, targets[rows]].mean())

    cross_entropy(x, targets, ignore_index=ignore).backward()
    (fd,) = finite_difference(f, [x.data])
    assert max_rel_err(x.grad, fd) < 1e-4


# ---------------------------------------------------------------------------
# plumbing ops
# ---------------------------------------------------------------------------

def test_gather_rows_and_gradient_accumulation():
    table = leaf(None, seed=16, shape=(5, 3))
    out = gather_axis0(table, [[1, 1], [4, 0]])
    assert out.shape == (2, 2, 3)
    sum_all(out).backward()
    expected = np.zeros((5, 3))
    for i in (1, 1, 4, 0):
        expected[i] += 1.0
    assert np.array_equal(table.grad, expected)


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        gather_axis0(leaf(np.zeros((2, 2))), [2])


def test_tile_leading_gradient_sums_over_repeats():
    x = leaf(None, seed=17, shape=(2, 3, 4))
    sum_all(tile_leading(x, 5)).backward()
    assert np.array_equal(x.grad, np.full((2, 3, 4), 5.0))


def test_swap_and_reshape_gradients():
    x = leaf(None, seed=18, shape=(2, 3, 4))
    w = np.random.default_rng(19).normal(size=(3, 2, 4))
    sum_all(mul(swap_axes(x, 0, 1), Tensor(w))).backward()
    assert np.array_equal(x.grad, w.swapaxes(0, 1))

    y = leaf(None, seed=20, shape=(6, 2))
    sum_all(reshape(y, (3, 4))).backward()
    assert np.array_equal(y.grad, np.ones((6, 2)))


def test_add_mul_scale():
    a = leaf([[1.0, 2.0]])
    b = leaf([[3.0, 4.0]])
    assert add(a, b).data.tolist() == [[4.0, 6.0]]
    assert mul(a, b).data.tolist() == [[3.0, 8.0]]
    assert (a * 2.0).data.tolist() == [[2.0, 4.0]]
    with pytest.raises(ShapeError):
        add(a, leaf([[1.0]]))


# ---------------------------------------------------------------------------
# engine behavior
# ---------------------------------------------------------------------------

def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        leaf(np.zeros((2, 2))).backward()


def test_two_backward_passes_bit_identical():
    a = leaf(None, seed=21, shape=(4, 4))
    b = leaf(None, seed=22, shape=(4, 4))
    out = sum_all(matmul(softmax(a, axis=1), relu(b)))
    out.backward()
    first = (a.grad.copy(), b.grad.copy())
    for node in graph_nodes(out):
        node.grad = None
    out.backward()
    assert np.array_equal(a.grad, first[0])
    assert np.array_equal(b.grad, first[1])


def test_gradients_accumulate_across_consumers():
    x = leaf([[2.0]])
    sum_all(add(x, x)).backward()
    assert x.grad.tolist() == [[2.0]]


def test_no_grad_blocks_graph_recording():
    x = leaf([[1.0]])
    with no_grad():
        out = add(x, x)
    assert not out.requires_grad
    assert out._parents == ()


def test_non_finite_leaf_rejected():
    with pytest.raises(ValueError):
        Tensor([np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])
