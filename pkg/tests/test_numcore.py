"""Unit tests for the tape autodiff core: forward values against hand
computations and numpy oracles, gradients against central finite differences."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import navmoe.numcore as nc


def rand(rng, r, c):
    return nc.parameter(rng.standard_normal((r, c)))


def fd_ok(fn, wrt, tol=1e-6, eps=1e-5, seed=0):
    err = nc.grad_check(fn, wrt, eps=eps, seed=seed)
    assert err < tol, f"finite-difference mismatch: {err:.3e}"


# ---------------------------------------------------------------- Tensor core

def test_tensor_coerces_1d_to_row():
    t = nc.constant([1.0, 2.0, 3.0])
    assert t.shape == (1, 3)


def test_tensor_rejects_3d():
    with pytest.raises(ValueError):
        nc.Tensor(np.zeros((2, 2, 2)))


def test_backward_requires_scalar():
    t = nc.parameter(np.ones((2, 3)))
    with pytest.raises(ValueError):
        nc.add(t, t).backward()


def test_item_requires_scalar():
    with pytest.raises(ValueError):
        nc.constant(np.ones((1, 2))).item()


def test_backward_accumulates_shared_node():
    # y = x + x: dy/dx = 2 through two paths into the same parent.
    x = nc.parameter([[3.0]])
    nc.add(x, x).backward()
    assert x.grad[0, 0] == 2.0


def test_backward_deep_chain_is_iterative():
    # long chains must not hit the recursion limit
    x = nc.parameter([[1.0]])
    y = x
    for _ in range(5000):
        y = nc.scale(y, 1.0)
    y.backward()
    assert x.grad[0, 0] == 1.0


def test_grad_none_for_constants():
    c = nc.constant([[2.0]])
    x = nc.parameter([[3.0]])
    nc.mul(c, x).backward()
    assert c.grad is None
    assert x.grad[0, 0] == 2.0


# ------------------------------------------------------------- op arithmetic

def test_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    out = nc.matmul(nc.constant(a), nc.constant(b))
    np.testing.assert_array_equal(out.data, a @ b)


def test_add_mul_broadcast_row():
    a = nc.constant(np.arange(6.0).reshape(2, 3))
    row = nc.constant([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(nc.add(a, row).data, a.data + row.data)
    np.testing.assert_array_equal(nc.mul(a, row).data, a.data * row.data)


def test_broadcast_grad_sums_over_rows():
    # d/db sum(A + b) where b is a broadcast row = column counts of A
    a = nc.constant(np.ones((4, 3)))
    b = nc.parameter(np.zeros((1, 3)))
    nc.sum_all(nc.add(a, b)).backward()
    np.testing.assert_array_equal(b.grad, np.full((1, 3), 4.0))


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_elementwise_grads_fd(seed):
    rng = np.random.default_rng(seed)
    a = rand(rng, 2, 3)
    b = rand(rng, 2, 3)
    fd_ok(lambda: nc.sum_all(nc.mul(nc.add(a, b), nc.relu(a))), [a, b], tol=1e-5)


def test_matmul_grad_fd():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    fd_ok(lambda: nc.sum_all(nc.matmul(a, b)), [a, b])


def test_sigmoid_log_grads_fd():
    rng = np.random.default_rng(2)
    a = rand(rng, 2, 4)
    fd_ok(lambda: nc.sum_all(nc.log(nc.sigmoid(a))), [a])


def test_sigmoid_range_and_symmetry():
    x = nc.constant([[-50.0, 0.0, 50.0]])
    y = nc.sigmoid(x).data
    assert y[0, 1] == 0.5
    assert 0.0 < y[0, 0] < 1e-20
    assert 1.0 - 1e-15 < y[0, 2] <= 1.0


def test_scale_transpose_values():
    a = nc.constant([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nc.scale(a, -2.0).data, -2.0 * a.data)
    np.testing.assert_array_equal(nc.transpose(a).data, a.data.T)


# ------------------------------------------------------------------- softmax

def test_softmax_uniform_logits():
    p = nc.softmax_row(nc.constant(np.zeros((2, 5)))).data
    np.testing.assert_allclose(p, 1.0 / 5.0)


def test_softmax_large_logit_saturates():
    p = nc.softmax_row(nc.constant([[1000.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(p, [[1.0, 0.0, 0.0]], atol=1e-200)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((3, 6))
    p1 = nc.softmax_row(nc.constant(z)).data
    p2 = nc.softmax_row(nc.constant(z + 123.0)).data
    np.testing.assert_allclose(p1, p2, atol=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(logits):
    p = nc.softmax_row(nc.constant([logits])).data
    assert abs(p.sum() - 1.0) < 1e-9
    assert (p >= 0).all()


def test_softmax_grad_fd():
    rng = np.random.default_rng(4)
    a = rand(rng, 2, 5)
    mix = nc.constant(rng.standard_normal((2, 5)))
    fd_ok(lambda: nc.sum_all(nc.mul(nc.softmax_row(a), mix)), [a])


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((1, 7))
    for tgt in range(7):
        ce = nc.cross_entropy_logits(nc.constant(z), tgt).item()
        ref = -(z[0, tgt] - np.log(np.exp(z - z.max()).sum()) - z.max())
        assert abs(ce - ref) < 1e-12


def test_cross_entropy_grad_is_softmax_minus_onehot():
    rng = np.random.default_rng(6)
    z = nc.parameter(rng.standard_normal((1, 5)))
    nc.cross_entropy_logits(z, 2).backward()
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    p[0, 2] -= 1.0
    np.testing.assert_allclose(z.grad, p, atol=1e-12)


# ------------------------------------------------------- structure shuffling

def test_slice_concat_roundtrip():
    rng = np.random.default_rng(7)
    a = nc.constant(rng.standard_normal((4, 6)))
    back = nc.concat_rows([nc.slice_rows(a, 0, 2), nc.slice_rows(a, 2, 4)])
    np.testing.assert_array_equal(back.data, a.data)
    back = nc.concat_cols([nc.slice_cols(a, 0, 3), nc.slice_cols(a, 3, 6)])
    np.testing.assert_array_equal(back.data, a.data)


def test_slice_grad_scatters():
    a = nc.parameter(np.ones((3, 2)))
    nc.sum_all(nc.slice_rows(a, 1, 2)).backward()
    np.testing.assert_array_equal(a.grad, [[0, 0], [1, 1], [0, 0]])


def test_take_rows_gathers():
    table = nc.constant(np.arange(12.0).reshape(4, 3))
    out = nc.take_rows(table, [3, 0, 3])
    np.testing.assert_array_equal(out.data, table.data[[3, 0, 3]])


def test_take_rows_grad_accumulates_duplicates():
    # a row used twice receives the sum of both output grads
    table = nc.parameter(np.zeros((4, 3)))
    nc.sum_all(nc.take_rows(table, [1, 1, 2])).backward()
    np.testing.assert_array_equal(table.grad[1], [2, 2, 2])
    np.testing.assert_array_equal(table.grad[2], [1, 1, 1])
    np.testing.assert_array_equal(table.grad[0], [0, 0, 0])


def test_pick_value_and_grad():
    a = nc.parameter([[1.0, 2.0], [3.0, 4.0]])
    p = nc.pick(a, 1, 0)
    assert p.item() == 3.0
    p.backward()
    np.testing.assert_array_equal(a.grad, [[0, 0], [1, 0]])


def test_mean_rows_value():
    a = nc.constant(np.arange(6.0).reshape(3, 2))
    np.testing.assert_allclose(nc.mean_rows(a).data, a.data.mean(axis=0, keepdims=True))


def test_structural_grads_fd():
    rng = np.random.default_rng(8)
    a = rand(rng, 4, 3)
    mix = nc.constant(rng.standard_normal((2, 3)))

    def loss():
        parts = nc.concat_rows([nc.slice_rows(a, 2, 4)])
        return nc.sum_all(nc.mul(parts, mix))

    fd_ok(loss, [a])
    fd_ok(lambda: nc.mean_all(nc.take_rows(a, [0, 0, 3])), [a])


# -------------------------------------------------------------------- layers

def test_linear_identity_weights():
    x = np.random.default_rng(9).standard_normal((3, 4))
    out = nc.linear(nc.constant(x), nc.constant(np.eye(4)))
    np.testing.assert_array_equal(out.data, x)


def test_linear_zero_input_returns_bias():
    b = nc.constant([[1.0, -2.0, 3.0]])
    out = nc.linear(nc.constant(np.zeros((2, 5))), nc.constant(np.zeros((5, 3))), b)
    np.testing.assert_array_equal(out.data, np.tile(b.data, (2, 1)))


def test_cross_attention_single_kv_row():
    # one key/value row: attention weights are 1, output = value projection
    rng = np.random.default_rng(10)
    d = 4
    xq, xkv = rand(rng, 3, d), rand(rng, 1, d)
    wq, wk, wv = rand(rng, d, d), rand(rng, d, d), rand(rng, d, d)
    out = nc.cross_attention(xq, xkv, wq, wk, wv, n_heads=2)
    v = xkv.data @ wv.data
    np.testing.assert_allclose(out.data, np.tile(v, (3, 1)), atol=1e-12)


def test_cross_attention_zero_query_averages_values():
    rng = np.random.default_rng(11)
    d = 4
    xq, xkv = rand(rng, 2, d), rand(rng, 5, d)
    zero = nc.constant(np.zeros((d, d)))
    wk, wv = rand(rng, d, d), rand(rng, d, d)
    out = nc.cross_attention(xq, xkv, zero, wk, wv, n_heads=1)
    np.testing.assert_allclose(out.data, np.tile((xkv.data @ wv.data).mean(0), (2, 1)),
                               atol=1e-12)


def test_cross_attention_grad_fd():
    rng = np.random.default_rng(12)
    d = 4
    xq, xkv = rand(rng, 3, d), rand(rng, 4, d)
    wq, wk, wv = rand(rng, d, d), rand(rng, d, d), rand(rng, d, d)
    mix = nc.constant(rng.standard_normal((3, d)))
    fd_ok(lambda: nc.sum_all(nc.mul(
        nc.cross_attention(xq, xkv, wq, wk, wv, n_heads=2), mix)),
        [xq, xkv, wq, wk, wv], tol=1e-5)


def test_gasa_zero_affinity_equals_self_attention():
    rng = np.random.default_rng(13)
    d = 4
    x = rand(rng, 5, d)
    wq, wk, wv = rand(rng, d, d), rand(rng, d, d), rand(rng, d, d)
    plain = nc.cross_attention(x, x, wq, wk, wv, n_heads=2)
    biased = nc.gasa(x, wq, wk, wv, nc.constant(np.zeros((5, 5))), n_heads=2)
    np.testing.assert_allclose(biased.data, plain.data, atol=1e-12)


def test_gasa_blocking_affinity_isolates_rows():
    # -inf-like off-diagonal affinity forces each row to attend only itself
    rng = np.random.default_rng(14)
    d = 4
    x = rand(rng, 4, d)
    wq, wk, wv = rand(rng, d, d), rand(rng, d, d), rand(rng, d, d)
    aff = np.full((4, 4), -1e9)
    np.fill_diagonal(aff, 0.0)
    out = nc.gasa(x, wq, wk, wv, nc.constant(aff), n_heads=1)
    np.testing.assert_allclose(out.data, x.data @ wv.data, atol=1e-12)


def test_gasa_requires_square_affinity():
    rng = np.random.default_rng(15)
    d = 4
    x = rand(rng, 3, d)
    w = rand(rng, d, d)
    with pytest.raises(ValueError):
        nc.gasa(x, w, w, w, nc.constant(np.zeros((3, 2))))


def test_gasa_grad_fd_including_affinity():
    rng = np.random.default_rng(16)
    d = 4
    x = rand(rng, 4, d)
    wq, wk, wv = rand(rng, d, d), rand(rng, d, d), rand(rng, d, d)
    aff = rand(rng, 4, 4)
    mix = nc.constant(rng.standard_normal((4, d)))
    fd_ok(lambda: nc.sum_all(nc.mul(nc.gasa(x, wq, wk, wv, aff, n_heads=2), mix)),
          [x, wq, wk, wv, aff], tol=1e-5)


def test_affinity_from_graph_values():
    pos = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    aff = nc.affinity_from_graph(pos, tau=2.0).data
    assert aff[0, 0] == 0.0 and aff[1, 1] == 0.0
    np.testing.assert_allclose(aff[0, 1], -2.5)
    np.testing.assert_allclose(aff, aff.T)


def test_affinity_single_node():
    np.testing.assert_array_equal(
        nc.affinity_from_graph(np.zeros((1, 3))).data, [[0.0]])


def test_ffn_zero_weights_gives_output_bias():
    rng = np.random.default_rng(17)
    d = 3
    x = nc.constant(rng.standard_normal((2, d)))
    z = nc.constant(np.zeros((d, d)))
    b1 = nc.constant(np.zeros((1, d)))
    b2 = nc.constant([[1.0, 2.0, 3.0]])
    out = nc.ffn(x, z, b1, z, b2)
    np.testing.assert_array_equal(out.data, np.tile(b2.data, (2, 1)))


def test_ffn_grad_fd():
    rng = np.random.default_rng(18)
    d = 3
    x = rand(rng, 2, d)
    w1, b1 = rand(rng, d, d), rand(rng, 1, d)
    w2, b2 = rand(rng, d, d), rand(rng, 1, d)
    mix = nc.constant(rng.standard_normal((2, d)))
    fd_ok(lambda: nc.sum_all(nc.mul(nc.ffn(x, w1, b1, w2, b2), mix)),
          [x, w1, b1, w2, b2], tol=1e-5)


# ------------------------------------------------------------------- storage

def test_param_block_rejects_duplicates():
    block = nc.ParamBlock()
    block.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        block.add("w", np.zeros((2, 2)))


def test_param_block_zero_grad_and_counts():
    block = nc.ParamBlock()
    w = block.add("w", np.ones((2, 3)))
    b = block.add("b", np.ones((1, 3)))
    nc.sum_all(nc.add(nc.matmul(nc.constant(np.ones((1, 2))), w), b)).backward()
    assert w.grad is not None and b.grad is not None
    block.zero_grad()
    assert w.grad is None and b.grad is None
    assert block.n_scalars() == 9


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(19)
    block = nc.ParamBlock()
    block.add("w", rng.standard_normal((3, 2)))
    block.add("b", rng.standard_normal((1, 2)))
    path = tmp_path / "ck.json"
    nc.save_params(str(path), block, header={"note": "x"})
    header, state = nc.load_params(str(path))
    assert header["note"] == "x"
    for name, t in block.items():
        np.testing.assert_array_equal(state[name], t.data)


def test_checkpoint_save_is_deterministic(tmp_path):
    block = nc.ParamBlock()
    block.add("w", np.arange(4.0).reshape(2, 2))
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    nc.save_params(str(p1), block)
    nc.save_params(str(p2), block)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_version_check(tmp_path):
    path = tmp_path / "ck.json"
    path.write_text(json.dumps({"format_version": 999, "header": {}, "params": {}}))
    with pytest.raises(ValueError):
        nc.load_params(str(path))


def test_load_state_dict_shape_mismatch():
    block = nc.ParamBlock()
    block.add("w", np.zeros((2, 2)))
    with pytest.raises(ValueError):
        block.load_state_dict({"w": np.zeros((3, 3))})


def test_load_state_dict_missing_key():
    block = nc.ParamBlock()
    block.add("w", np.zeros((2, 2)))
    with pytest.raises(KeyError):
        block.load_state_dict({})


# ---------------------------------------------------------------- grad_check

def test_grad_check_flags_wrong_gradient():
    # an op with a deliberately broken backward must be caught
    x = nc.parameter([[1.0, 2.0]])

    def broken():
        out = nc.Tensor(x.data * 3.0, requires_grad=True, parents=(x,))
        out._backward = lambda g: x._accum(2.0 * g)  # wrong: forward is 3x
        return nc.sum_all(out)

    assert nc.grad_check(broken, [x]) > 0.1


def test_grad_check_subsampling_budget():
    rng = np.random.default_rng(20)
    a = rand(rng, 10, 10)
    err = nc.grad_check(lambda: nc.sum_all(nc.mul(a, a)), [a],
                        max_coords_per_tensor=5, seed=1)
    assert err < 1e-7
