import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfuse import tensor_core as tc
from conftest import fd_gradient, rel_err


# --- independent oracles ----------------------------------------------------


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product in float64."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


def softmax_oracle(row: np.ndarray) -> np.ndarray:
    """Direct exp/sum evaluation in float64, no shift."""
    e = np.exp(np.asarray(row, dtype=np.float64))
    return e / e.sum()


def bilinear_point_oracle(x: np.ndarray, h_out: int, w_out: int, i: int, j: int, c: int) -> float:
    """Scalar evaluation of the resampling formula at one output position."""
    h, w = x.shape[0], x.shape[1]
    sy = min(max((i + 0.5) * (h / h_out) - 0.5, 0.0), h - 1.0)
    sx = min(max((j + 0.5) * (w / w_out) - 0.5, 0.0), w - 1.0)
    y0 = min(int(np.floor(sy)), h - 1)
    x0 = min(int(np.floor(sx)), w - 1)
    y1 = min(y0 + 1, h - 1)
    x1 = min(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    return float(
        (1 - fy) * (1 - fx) * x[y0, x0, c]
        + (1 - fy) * fx * x[y0, x1, c]
        + fy * (1 - fx) * x[y1, x0, c]
        + fy * fx * x[y1, x1, c]
    )


# --- matmul ------------------------------------------------------------------


def test_matmul_identity():
    eye = tc.Tensor(np.eye(2), dtype=np.float64)
    m = tc.Tensor([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
    npt.assert_array_equal(tc.matmul(eye, m).data, m.data)


def test_matmul_hand_case():
    a = tc.Tensor([[1.0, 2.0]], dtype=np.float64)
    b = tc.Tensor([[3.0], [4.0]], dtype=np.float64)
    npt.assert_array_equal(tc.matmul(a, b).data, [[11.0]])


def test_matmul_against_triple_loop(rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    got = tc.matmul(tc.Tensor(a, dtype=np.float64), tc.Tensor(b, dtype=np.float64))
    assert np.max(np.abs(got.data - matmul_oracle(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    a = tc.Tensor(np.zeros((2, 3)))
    b = tc.Tensor(np.zeros((4, 2)))
    with pytest.raises(tc.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        tc.matmul(a, b)


def test_matmul_associativity(rng):
    a = tc.Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
    b = tc.Tensor(rng.standard_normal((6, 5)), dtype=np.float64)
    c = tc.Tensor(rng.standard_normal((5, 3)), dtype=np.float64)
    left = tc.matmul(tc.matmul(a, b), c)
    right = tc.matmul(a, tc.matmul(b, c))
    assert np.max(np.abs(left.data - right.data)) < 1e-9


# --- softmax ------------------------------------------------------------------


def test_softmax_symmetry():
    out = tc.softmax_rows(tc.Tensor([[0.0, 0.0]], dtype=np.float64))
    npt.assert_array_equal(out.data, [[0.5, 0.5]])


def test_softmax_shift_invariance_no_overflow():
    out = tc.softmax_rows(tc.Tensor([[1000.0, 1000.0]], dtype=np.float64))
    assert np.all(np.isfinite(out.data))
    npt.assert_array_equal(out.data, [[0.5, 0.5]])


def test_softmax_against_direct_oracle():
    row = np.array([1.0, 2.0, 3.0])
    got = tc.softmax_rows(tc.Tensor(row[None, :], dtype=np.float64))
    assert np.max(np.abs(got.data[0] - softmax_oracle(row))) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=1, max_size=6),
        min_size=1,
        max_size=5,
    ).filter(lambda rows: len({len(r) for r in rows}) == 1)
)
def test_softmax_rows_sum_to_one(rows):
    m = tc.Tensor(np.array(rows), dtype=np.float64)
    out = tc.softmax_rows(m)
    assert np.all(out.data >= 0)
    npt.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)


# --- pooling ------------------------------------------------------------------


def test_pool_window_arithmetic():
    m = tc.Tensor(np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(2, 2, 1), dtype=np.float64)
    assert tc.pool2d(m, 2, "avg").data[0, 0, 0] == 4.0
    assert tc.pool2d(m, 2, "max").data[0, 0, 0] == 7.0


def test_pool_constant_invariance(rng):
    m = tc.Tensor(np.full((4, 6, 3), 2.5), dtype=np.float64)
    for kind in ("avg", "max"):
        out = tc.pool2d(m, 2, kind)
        npt.assert_array_equal(out.data, np.full((2, 3, 3), 2.5))


def test_pool_max_dominates_avg(rng):
    m = tc.Tensor(rng.standard_normal((6, 4, 2)), dtype=np.float64)
    avg = tc.pool2d(m, 2, "avg").data
    mx = tc.pool2d(m, 2, "max").data
    assert np.all(mx >= avg)


def test_pool_divisibility_error():
    m = tc.Tensor(np.zeros((3, 4, 1)))
    with pytest.raises(tc.ConfigurationError):
        tc.pool2d(m, 2, "avg")


def test_pool_max_tie_break_first_index():
    # both window elements equal: gradient must land on the row-major first
    m = tc.Tensor(np.array([[2.0, 2.0], [0.0, 1.0]]).reshape(2, 2, 1), dtype=np.float64)
    tape = tc.Tape()
    tape.watch(m, "m")
    with tc.record_on(tape):
        out = tc.pool2d(m, 2, "max")
        loss = tc.sum_all(out)
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    npt.assert_array_equal(
        rec["m"].data, np.array([[1.0, 0.0], [0.0, 0.0]]).reshape(2, 2, 1)
    )


def test_pool_gradients_match_finite_differences(rng):
    x = rng.standard_normal((4, 4, 2))
    for kind in ("avg", "max"):

        def loss_fn(t, kind=kind):
            out = tc.pool2d(t, 2, kind)
            return float((out.data ** 2).sum())

        tape = tc.Tape()
        xt = tc.Tensor(x, dtype=np.float64)
        tape.watch(xt, "x")
        with tc.record_on(tape):
            out = tc.pool2d(xt, 2, kind)
            loss = tc.sum_all(tc.mul(out, out))
        rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
        assert rel_err(rec["x"].data, fd_gradient(loss_fn, xt)) < 1e-4


# --- bilinear resize ----------------------------------------------------------


def test_bilinear_same_size_is_bit_identical(rng):
    x = rng.standard_normal((5, 7, 3))
    t = tc.Tensor(x, dtype=np.float64)
    out = tc.bilinear_resize(t, 5, 7)
    npt.assert_array_equal(out.data, x)


def test_bilinear_constant_invariance():
    t = tc.Tensor(np.full((3, 3, 2), 1.25), dtype=np.float64)
    out = tc.bilinear_resize(t, 7, 5)
    npt.assert_array_equal(out.data, np.full((7, 5, 2), 1.25))


def test_bilinear_upsample_against_point_oracle():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1)
    out = tc.bilinear_resize(tc.Tensor(x, dtype=np.float64), 4, 4)
    for i in range(4):
        for j in range(4):
            expected = bilinear_point_oracle(x, 4, 4, i, j, 0)
            assert abs(out.data[i, j, 0] - expected) < 1e-12, (i, j)


def test_bilinear_respects_input_bounds(rng):
    x = rng.standard_normal((4, 6, 2))
    out = tc.bilinear_resize(tc.Tensor(x, dtype=np.float64), 9, 5).data
    assert out.min() >= x.min() - 1e-12
    assert out.max() <= x.max() + 1e-12


def test_bilinear_gradient_matches_finite_differences(rng):
    x = rng.standard_normal((3, 4, 2))
    xt = tc.Tensor(x, dtype=np.float64)

    def loss_fn(t):
        out = tc.bilinear_resize(t, 5, 6)
        return float((out.data ** 2).sum())

    tape = tc.Tape()
    tape.watch(xt, "x")
    with tc.record_on(tape):
        out = tc.bilinear_resize(xt, 5, 6)
        loss = tc.sum_all(tc.mul(out, out))
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    assert rel_err(rec["x"].data, fd_gradient(loss_fn, xt)) < 1e-4


# --- backward / tape ----------------------------------------------------------


def test_backward_linear_case(rng):
    w = tc.Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    x = tc.Tensor(rng.standard_normal((4, 2)), dtype=np.float64)
    tape = tc.Tape()
    tape.watch(w, "w")
    with tc.record_on(tape):
        y = tc.matmul(w, x)
        loss = tc.sum_all(y)
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    # d(sum(Wx))/dW = column sums of x broadcast across rows
    expected = np.tile(x.data.sum(axis=1), (3, 1))
    npt.assert_allclose(rec["w"].data, expected, atol=1e-12)


def test_backward_softmax_row_sums_have_zero_gradient(rng):
    v = tc.Tensor(rng.standard_normal((3, 5)), dtype=np.float64)
    tape = tc.Tape()
    tape.watch(v, "v")
    with tc.record_on(tape):
        y = tc.softmax_rows(v)
        loss = tc.sum_all(y)
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    npt.assert_allclose(rec["v"].data, 0.0, atol=1e-12)


def test_backward_before_forward_is_state_error():
    tape = tc.Tape()
    with pytest.raises(tc.TapeStateError):
        tc.backward(tc.scalar(1.0), tape)


def test_backward_unused_parameter_absent(rng):
    used = tc.Tensor(rng.standard_normal((2, 2)), dtype=np.float64)
    unused = tc.Tensor(rng.standard_normal((2, 2)), dtype=np.float64)
    tape = tc.Tape()
    tape.watch(used, "used")
    tape.watch(unused, "unused")
    with tc.record_on(tape):
        loss = tc.sum_all(used)
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    assert "used" in rec
    assert "unused" not in rec


def test_backward_accumulates_across_reuse(rng):
    x = tc.Tensor(rng.standard_normal((3, 3)), dtype=np.float64)
    tape = tc.Tape()
    tape.watch(x, "x")
    with tc.record_on(tape):
        loss = tc.sum_all(tc.mul(x, x))
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    npt.assert_allclose(rec["x"].data, 2 * x.data, atol=1e-12)


def test_composed_graph_matches_finite_differences(rng):
    # exercise matmul + softmax + pooling + resize + elementwise in one graph
    w = tc.Tensor(rng.standard_normal((4, 4)) * 0.4, dtype=np.float64)
    x = rng.standard_normal((6, 4))

    def forward(wt):
        toks = tc.matmul(tc.Tensor(x, dtype=np.float64), wt)
        att = tc.softmax_rows(toks)
        fm = tc.reshape(att, (2, 3, 4))
        up = tc.bilinear_resize(fm, 4, 6)
        pooled = tc.pool2d(up, 2, "max")
        return tc.mean_all(tc.mul(pooled, pooled))

    tape = tc.Tape()
    tape.watch(w, "w")
    with tc.record_on(tape):
        loss = forward(w)
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    fd = fd_gradient(lambda t: forward(t).item(), w)
    assert rel_err(rec["w"].data, fd) < 1e-4


@pytest.mark.parametrize("opname", [
    "matmul", "transpose", "add", "add_bias", "sub", "mul", "scalar_mul",
    "const_scale", "relu", "sigmoid", "softmax_rows", "reshape", "col_slice",
    "concat_cols", "pool_avg", "pool_max", "bilinear", "space_to_channel",
    "sum_all", "mean_all",
])
def test_every_op_adjoint_matches_finite_differences(opname, rng):
    x = tc.Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
    m3 = tc.Tensor(rng.standard_normal((4, 6, 2)), dtype=np.float64)
    other = tc.Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
    rhs = tc.Tensor(rng.standard_normal((6, 3)), dtype=np.float64)
    bias = tc.Tensor(rng.standard_normal(6), dtype=np.float64)
    coeff = tc.scalar(0.7, dtype=np.float64)
    probe2 = rng.standard_normal((4, 6))

    builders = {
        "matmul": (x, lambda t: tc.matmul(t, rhs)),
        "transpose": (x, tc.transpose),
        "add": (x, lambda t: tc.add(t, other)),
        "add_bias": (bias, lambda t: tc.add(x, t)),
        "sub": (x, lambda t: tc.sub(t, other)),
        "mul": (x, lambda t: tc.mul(t, other)),
        "scalar_mul": (coeff, lambda t: tc.scalar_mul(t, x)),
        "const_scale": (x, lambda t: tc.const_scale(t, -1.3)),
        "relu": (x, tc.relu),
        "sigmoid": (x, tc.sigmoid),
        "softmax_rows": (x, tc.softmax_rows),
        "reshape": (x, lambda t: tc.reshape(t, (3, 8))),
        "col_slice": (x, lambda t: tc.col_slice(t, 1, 4)),
        "concat_cols": (x, lambda t: tc.concat_cols([t, other])),
        "pool_avg": (m3, lambda t: tc.pool2d(t, 2, "avg")),
        "pool_max": (m3, lambda t: tc.pool2d(t, 2, "max")),
        "bilinear": (m3, lambda t: tc.bilinear_resize(t, 7, 5)),
        "space_to_channel": (m3, lambda t: tc.space_to_channel(t, 2)),
        "sum_all": (x, tc.sum_all),
        "mean_all": (x, tc.mean_all),
    }
    leaf, op = builders[opname]

    def run_loss(t):
        out = op(t)
        sq = tc.mul(out, out)
        return tc.sum_all(sq)

    tape = tc.Tape()
    tape.watch(leaf, "p")
    with tc.record_on(tape):
        loss = run_loss(leaf)
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    fd = fd_gradient(lambda t: run_loss(t).item(), leaf)
    assert rel_err(rec["p"].data, fd) < 1e-4, opname


def test_determinism_bitwise(rng):
    a = rng.standard_normal((8, 8))
    b = rng.standard_normal((8, 8))

    def run():
        t = tc.softmax_rows(tc.matmul(tc.Tensor(a, dtype=np.float64), tc.Tensor(b, dtype=np.float64)))
        return tc.pool2d(tc.reshape(t, (4, 2, 8)), 2, "avg").data

    first, second = run(), run()
    npt.assert_array_equal(first, second)


# --- elementwise / shape ops ---------------------------------------------------


def test_scalar_mul_gradient(rng):
    s = tc.scalar(1.7, dtype=np.float64)
    x = tc.Tensor(rng.standard_normal((3, 2)), dtype=np.float64)
    tape = tc.Tape()
    tape.watch(s, "s")
    tape.watch(x, "x")
    with tc.record_on(tape):
        loss = tc.sum_all(tc.scalar_mul(s, x))
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    npt.assert_allclose(rec["s"].data, [x.data.sum()], atol=1e-12)
    npt.assert_allclose(rec["x"].data, np.full((3, 2), 1.7), atol=1e-12)


def test_bias_add_broadcast_gradient(rng):
    x = tc.Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
    b = tc.Tensor(rng.standard_normal(3), dtype=np.float64)
    tape = tc.Tape()
    tape.watch(b, "b")
    with tc.record_on(tape):
        loss = tc.sum_all(tc.add(x, b))
    rec = tc.backward(tc.scalar(1.0, dtype=np.float64), tape, loss)
    npt.assert_allclose(rec["b"].data, np.full(3, 4.0), atol=1e-12)


def test_col_slice_and_concat_round_trip(rng):
    x = tc.Tensor(rng.standard_normal((3, 6)), dtype=np.float64)
    parts = [tc.col_slice(x, j, j + 2) for j in (0, 2, 4)]
    back = tc.concat_cols(parts)
    npt.assert_array_equal(back.data, x.data)


def test_space_to_channel_layout():
    # 2x2x1 block must flatten row-major: (0,0), (0,1), (1,0), (1,1)
    x = tc.Tensor(np.arange(4.0).reshape(2, 2, 1), dtype=np.float64)
    out = tc.space_to_channel(x, 2)
    npt.assert_array_equal(out.data.reshape(-1), [0.0, 1.0, 2.0, 3.0])


def test_sigmoid_stable_at_extremes():
    out = tc.sigmoid(tc.Tensor([-800.0, 0.0, 800.0], dtype=np.float64))
    assert np.all(np.isfinite(out.data))
    npt.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)


def test_tensor_is_immutable():
    t = tc.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_mixed_precision_rejected():
    a = tc.Tensor([[1.0]], dtype=np.float32)
    b = tc.Tensor([[1.0]], dtype=np.float64)
    with pytest.raises(tc.ConfigurationError):
        tc.add(a, b)


# --- rawtensor format ----------------------------------------------------------


def test_rawtensor_round_trip(tmp_path, rng):
    t = tc.Tensor(rng.standard_normal((3, 4, 2)), dtype=np.float32)
    path = tmp_path / "map.rawtensor"
    tc.write_rawtensor(path, t)
    back = tc.read_rawtensor(path)
    assert back.dtype == t.dtype
    npt.assert_array_equal(back.data, t.data)


def test_rawtensor_header_is_one_json_line(tmp_path):
    t = tc.Tensor(np.zeros((2, 2, 1)), dtype=np.float32)
    path = tmp_path / "map.rawtensor"
    tc.write_rawtensor(path, t)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
    assert header == {"v": 1, "dtype": "f32", "shape": [2, 2, 1]}


def test_rawtensor_truncated_payload_rejected(tmp_path):
    t = tc.Tensor(np.zeros((2, 2, 1)), dtype=np.float32)
    path = tmp_path / "map.rawtensor"
    tc.write_rawtensor(path, t)
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(tc.ConfigurationError):
        tc.read_rawtensor(path)
