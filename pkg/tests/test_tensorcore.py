import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from lidarseq import tensorcore as tc
from lidarseq.errors import ConfigurationError, FormatError, TrainingError, UsageError
from lidarseq.training import FrameTruth, LossWeights, total_loss

import oracles


def T(a, grad=False):
    return tc.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --- conv2d ---------------------------------------------------------------

def test_conv_zero_input_gives_zero():
    rng = np.random.default_rng(0)
    out = tc.conv2d(T(np.zeros((3, 5, 2))), T(rng.normal(size=(3, 3, 2, 4))), T(np.zeros(4)))
    assert out.shape == (3, 5, 4)
    assert not out.data.any()


def test_conv_identity_kernel_on_single_pixel():
    k = np.zeros((3, 3, 1, 1))
    k[1, 1, 0, 0] = 1.0
    x = np.array([[[2.5]]])
    out = tc.conv2d(T(x), T(k), T([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out = tc.conv2d(T(x), T(k), T(b))
    np.testing.assert_allclose(out.data, oracles.direct_conv(x, k, b), atol=1e-6)


def test_conv_float32_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 8, 3)).astype(np.float32)
    k = rng.normal(size=(3, 3, 3, 2)).astype(np.float32)
    b = rng.normal(size=2).astype(np.float32)
    out = tc.conv2d(tc.Tensor(x), tc.Tensor(k), tc.Tensor(b))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.data, oracles.direct_conv(x, k, b), atol=1e-5)


def test_conv_shape_mismatch_reports_both_shapes():
    with pytest.raises(ConfigurationError, match=r"\(4, 6, 2\).*\(3, 3, 3, 1\)"):
        tc.conv2d(T(np.zeros((4, 6, 2))), T(np.zeros((3, 3, 3, 1))), T(np.zeros(1)))


@pytest.mark.parametrize("shift", [1, 3, 7])
def test_conv_is_equivariant_to_column_rotation(shift):
    rng = np.random.default_rng(shift)
    x = rng.normal(size=(5, 8, 2))
    k, b = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    rotated_first = tc.conv2d(T(np.roll(x, shift, axis=1)), T(k), T(b)).data
    rotated_after = np.roll(tc.conv2d(T(x), T(k), T(b)).data, shift, axis=1)
    np.testing.assert_allclose(rotated_first, rotated_after, rtol=0, atol=1e-12)


def test_one_by_one_conv():
    rng = np.random.default_rng(3)
    x, k, b = rng.normal(size=(2, 4, 3)), rng.normal(size=(1, 1, 3, 2)), rng.normal(size=2)
    out = tc.conv2d(T(x), T(k), T(b))
    np.testing.assert_allclose(out.data, np.einsum("hwc,cd->hwd", x, k[0, 0]) + b)


# --- maxpool / upsample / softmax / concat -------------------------------

def test_maxpool_pair():
    out, idx = tc.maxpool_w(T([[[3.0], [5.0]]]))
    assert out.data.ravel().tolist() == [5.0]
    assert idx.ravel().tolist() == [1]


def test_maxpool_constant_input():
    out, _ = tc.maxpool_w(T(np.full((3, 6, 2), 4.0)))
    assert out.shape == (3, 3, 2)
    assert (out.data == 4.0).all()


def test_maxpool_matches_pairwise_oracle():
    x = np.random.default_rng(4).normal(size=(8, 16, 4))
    out, _ = tc.maxpool_w(T(x))
    expected = np.empty((8, 8, 4))
    for i in range(8):
        for j in range(8):
            for k in range(4):
                expected[i, j, k] = max(x[i, 2 * j, k], x[i, 2 * j + 1, k])
    np.testing.assert_array_equal(out.data, expected)


def test_maxpool_odd_width_rejected():
    with pytest.raises(ConfigurationError):
        tc.maxpool_w(T(np.zeros((2, 5, 1))))


def test_maxpool_backward_routes_each_gradient_once():
    rng = np.random.default_rng(5)
    x = T(rng.normal(size=(4, 8, 3)), grad=True)
    g = rng.normal(size=(4, 4, 3))
    out, _ = tc.maxpool_w(x)
    tc.weighted_sum(out, g).backward()
    assert np.count_nonzero(x.grad) == g.size
    np.testing.assert_allclose(np.abs(x.grad).sum(), np.abs(g).sum())


def test_upsample_factor_one_is_identity():
    x = T(np.arange(6.0).reshape(1, 3, 2))
    np.testing.assert_array_equal(tc.upsample_w(x, 1).data, x.data)


def test_upsample_replicates_columns():
    out = tc.upsample_w(T([[[1.0], [2.0]]]), 2)
    assert out.data.ravel().tolist() == [1.0, 1.0, 2.0, 2.0]


def test_upsample_zero_factor_rejected():
    with pytest.raises(ConfigurationError):
        tc.upsample_w(T(np.zeros((1, 2, 1))), 0)


@pytest.mark.parametrize("factor", [2, 3, 4])
def test_upsample_sum_gradient_equals_factor(factor):
    x = T(np.random.default_rng(factor).normal(size=(2, 3, 2)), grad=True)
    tc.total_sum(tc.upsample_w(x, factor)).backward()
    np.testing.assert_array_equal(x.grad, np.full(x.shape, float(factor)))
    err, _ = tc.grad_check(lambda a: tc.total_sum(tc.upsample_w(a, factor)), x)
    assert err < 1e-6


def test_softmax_symmetric_logits():
    out = tc.softmax_pixels(T([[[0.0, 0.0]]]))
    np.testing.assert_allclose(out.data.ravel(), [0.5, 0.5])


def test_softmax_large_logits_do_not_overflow():
    out = tc.softmax_pixels(T([[[1000.0, 0.0]]]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data.ravel(), [1.0, 0.0], atol=1e-12)


def test_softmax_matches_exp_normalise():
    z = np.random.default_rng(6).normal(size=(2, 3, 2))
    e = np.exp(z)
    np.testing.assert_allclose(tc.softmax_pixels(T(z)).data, e / e.sum(-1, keepdims=True), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 2), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(z):
    p = tc.softmax_pixels(T(z)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_concat_single_and_pair():
    a = T([[[1.0]]])
    assert tc.concat_channels([a]) is a
    out = tc.concat_channels([a, T([[[2.0]]])])
    assert out.data.ravel().tolist() == [1.0, 2.0]


def test_concat_sum_gradient_is_ones():
    rng = np.random.default_rng(7)
    xs = [T(rng.normal(size=(2, 4, c)), grad=True) for c in (1, 3, 2)]
    tc.total_sum(tc.concat_channels(xs)).backward()
    for x in xs:
        np.testing.assert_array_equal(x.grad, np.ones(x.shape))


def test_concat_spatial_mismatch():
    with pytest.raises(ConfigurationError):
        tc.concat_channels([T(np.zeros((2, 4, 1))), T(np.zeros((2, 2, 1)))])


# --- grad_check -----------------------------------------------------------

def test_grad_check_linear_sum_is_exact():
    x = T(np.random.default_rng(8).normal(size=(3, 4, 2)))
    err, checked = tc.grad_check(tc.total_sum, x)
    assert checked == x.data.size
    assert err < 1e-9


def test_grad_check_rejects_non_scalar():
    with pytest.raises(UsageError):
        tc.grad_check(lambda a: tc.relu(a), T(np.ones((1, 2, 1))))


def test_grad_check_conv_softmax_cross_entropy():
    rng = np.random.default_rng(9)
    x = T(rng.normal(size=(4, 8, 1)))
    k = T(rng.normal(size=(3, 3, 1, 2)))
    b = T(rng.normal(size=2))
    labels = rng.integers(0, 2, size=(4, 8)).astype(np.uint8)
    labels[0, 0] = 255
    truth = FrameTruth(labels, np.zeros((4, 8, 2)))

    def f(x, k, b):
        return total_loss(tc.softmax_pixels(tc.conv2d(x, k, b)), None, truth, LossWeights(1.0, 0.0, 0.0))[0]

    err, checked = tc.grad_check(f, [x, k, b])
    assert checked == x.data.size + k.data.size + b.data.size
    assert err < 1e-3


def test_grad_check_maxpool_away_from_ties():
    rng = np.random.default_rng(10)
    x = T(rng.permutation(48).reshape(2, 8, 3) * 0.1)  # distinct values, gaps >> eps
    g = rng.normal(size=(2, 4, 3))
    err, _ = tc.grad_check(lambda a: tc.weighted_sum(tc.maxpool_w(a)[0], g), x)
    assert err < 1e-3


def test_grad_check_every_op_on_small_random_inputs():
    rng = np.random.default_rng(11)
    x = T(rng.normal(size=(3, 8, 2)))
    k = T(rng.normal(size=(3, 3, 2, 4)))
    b = T(rng.normal(size=4))
    g = rng.normal(size=(3, 8, 3))

    def f(x, k, b):
        h = tc.relu(tc.conv2d(x, k, b))
        p, _ = tc.maxpool_w(h)
        u = tc.upsample_w(p, 2)
        c = tc.concat_channels([u, x])
        y = tc.add(tc.softmax_pixels(c), c)
        return tc.weighted_sum(tc.conv2d(y, T(np.ones((1, 1, 6, 3)) * 0.3), T(np.zeros(3))), g)

    err, checked = tc.grad_check(f, [x, k, b], skip_kinks=True)
    assert checked > 0.9 * (x.data.size + k.data.size + b.data.size)
    assert err < 1e-3


# --- Adam -----------------------------------------------------------------

def _scalar_param(value):
    return {"x": tc.Tensor(np.array([value]), requires_grad=True)}


def test_adam_zero_gradient_leaves_parameters():
    params = _scalar_param(1.5)
    state = tc.AdamState.for_params(params, lr=0.1)
    for _ in range(5):
        tc.adam_step(params, {"x": np.zeros(1)}, state)
    assert params["x"].data[0] == 1.5
    assert state.step == 5


def test_adam_first_step_moves_by_learning_rate():
    params = _scalar_param(0.0)
    state = tc.AdamState.for_params(params, lr=0.01)
    tc.adam_step(params, {"x": np.array([3.0])}, state)
    np.testing.assert_allclose(params["x"].data[0], -0.01, rtol=1e-6)


def test_adam_descends_parabola():
    params = _scalar_param(1.0)
    state = tc.AdamState.for_params(params, lr=0.1)
    history = [1.0]
    for _ in range(10):
        tc.adam_step(params, {"x": 2 * params["x"].data}, state)
        history.append(abs(params["x"].data[0]))
    assert all(b < a for a, b in zip(history, history[1:]))


def test_adam_is_deterministic():
    runs = []
    for _ in range(2):
        params = _scalar_param(0.3)
        state = tc.AdamState.for_params(params, lr=0.05)
        for g in (1.0, -2.0, 0.5):
            tc.adam_step(params, {"x": np.array([g])}, state)
        runs.append((params["x"].data.tobytes(), state.m["x"].tobytes(), state.v["x"].tobytes()))
    assert runs[0] == runs[1]


def test_adam_missing_gradient_names_parameter():
    params = {"a": tc.Tensor(np.zeros(1)), "layer.weight": tc.Tensor(np.zeros(2))}
    state = tc.AdamState.for_params(params)
    with pytest.raises(TrainingError, match="layer.weight"):
        tc.adam_step(params, {"a": np.zeros(1)}, state)


# --- record files ---------------------------------------------------------

def test_records_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    recs = [("a.weight", rng.normal(size=(3, 3, 1, 2)).astype(np.float32)),
            ("a.bias", np.zeros(2, np.float32)), ("scalar", tc.pack_f64(3e-5))]
    tc.write_records(tmp_path / "f.lsqw", recs)
    back = tc.read_records(tmp_path / "f.lsqw")
    assert list(back) == [r[0] for r in recs]
    for name, arr in recs:
        assert back[name].tobytes() == arr.tobytes()
    assert tc.unpack_f64(back["scalar"]) == 3e-5


def test_records_header_layout(tmp_path):
    tc.write_records(tmp_path / "f.lsqw", [("ab", np.array([[1.0, 2.0]], np.float32))])
    raw = (tmp_path / "f.lsqw").read_bytes()
    assert raw[:4] == b"LSQW"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6:8] == (2).to_bytes(2, "little") and raw[8:10] == b"ab"
    assert raw[10] == 2
    assert raw[11:19] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[19:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate", [
    lambda raw: b"XXXX" + raw[4:],
    lambda raw: raw[:4] + (9).to_bytes(2, "little") + raw[6:],
    lambda raw: raw[:-3],
    lambda raw: raw[:8],
])
def test_records_reject_corruption(tmp_path, mutate):
    path = tmp_path / "f.lsqw"
    tc.write_records(path, [("w", np.ones((2, 2), np.float32))])
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError):
        tc.read_records(path)
