"""Gradient and forward-pass verification for the tensor kernels.

Forward paths are checked against literal-loop references; backward paths
against central finite differences. The denominators use
max(|analytic|, |numeric|, 1e-3) so tiny gradients are compared absolutely.
"""

import numpy as np
import pytest

from fd_suite import primitive_cases, run_suite
from oracles import conv2d_naive, fd_check, rel_err
from waterflow import autodiff as ad
from waterflow.errors import ContractError, ShapeError

FD_TOL = 1e-4


# ---------------------------------------------------------------------------
# finite differences


def test_every_primitive_has_a_case():
    names = {name for name, _, _ in primitive_cases(0)}
    expected = {
        "add", "sub", "neg", "mul", "div", "add_scalar", "mul_scalar", "log",
        "sigmoid", "silu", "clamp", "sum_all", "mean_all",
        "conv2d_s1p1", "conv2d_s2p0", "conv2d_s4p3",
        "group_norm", "upsample_bilinear", "downsample_avg",
        "concat_channels", "scale_shift", "linear",
    }
    assert names == expected


def test_primitive_gradients_match_finite_differences():
    worst, failures = run_suite(range(4), tol=FD_TOL)
    assert not failures, f"gradient mismatches: {failures}"


# ---------------------------------------------------------------------------
# forward oracles


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 0, 2), (2, 1, 3), (4, 3, 7)])
def test_conv2d_matches_loop_reference(stride, pad, k):
    gen = np.random.default_rng(stride * 31 + pad * 7 + k)
    x = gen.standard_normal((2, 3, 9, 9))
    w = gen.standard_normal((4, 3, k, k))
    b = gen.standard_normal(4)
    got = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b), stride, pad).data
    ref = conv2d_naive(x, w, b, stride, pad)
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() < 1e-10


def test_group_norm_matches_direct_statistics():
    gen = np.random.default_rng(5)
    x = gen.standard_normal((2, 6, 4, 4))
    gain = gen.uniform(0.5, 1.5, 6)
    shift = gen.standard_normal(6)
    out = ad.group_norm(ad.constant(x), 3, ad.constant(gain), ad.constant(shift)).data
    ref = np.empty_like(x)
    for n in range(2):
        for g in range(3):
            sl = x[n, 2 * g : 2 * g + 2]
            norm = (sl - sl.mean()) / np.sqrt(sl.var() + 1e-6)
            ref[n, 2 * g : 2 * g + 2] = norm * gain[2 * g : 2 * g + 2, None, None] + shift[
                2 * g : 2 * g + 2, None, None
            ]
    assert np.abs(out - ref).max() < 1e-12
    # each (batch, group) slab is standardized before the affine
    plain = ad.group_norm(ad.constant(x), 3, ad.constant(np.ones(6)), ad.constant(np.zeros(6))).data
    for n in range(2):
        for g in range(3):
            sl = plain[n, 2 * g : 2 * g + 2]
            assert abs(sl.mean()) < 1e-12
            assert abs(sl.std() - 1.0) < 1e-3  # eps keeps it just under 1


def test_upsample_bilinear_half_pixel_values():
    # factor 2 on a length-2 axis: weights (1, 0), (3/4, 1/4), (1/4, 3/4), (0, 1)
    x = np.array([[[[1.0, 5.0], [3.0, 7.0]]]])
    out = ad.upsample_bilinear(ad.constant(x), 2).data[0, 0]
    row0 = np.array([1.0, 2.0, 4.0, 5.0])
    # the second input row exceeds the first by 2 everywhere
    expected = np.stack([row0, row0 + 0.25 * 2, row0 + 0.75 * 2, row0 + 2.0])
    assert np.abs(out - expected).max() < 1e-12


def test_upsample_factor_one_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 3))
    assert np.array_equal(ad.upsample_bilinear(ad.constant(x), 1).data, x)


def test_downsample_avg_block_means():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = ad.downsample_avg(ad.constant(x), 2).data[0, 0]
    assert np.array_equal(out, [[2.5, 4.5], [10.5, 12.5]])


def test_concat_channels_order():
    a = np.zeros((1, 2, 2, 2))
    b = np.ones((1, 1, 2, 2))
    out = ad.concat_channels(ad.constant(a), ad.constant(b)).data
    assert out.shape == (1, 3, 2, 2)
    assert out[:, :2].sum() == 0 and out[:, 2:].min() == 1


def test_scale_shift_identity_at_zero():
    x = np.random.default_rng(1).standard_normal((2, 3, 2, 2))
    out = ad.scale_shift_channels(ad.constant(x), ad.constant(np.zeros(3)), ad.constant(np.zeros(3))).data
    assert np.array_equal(out, x)


def test_linear_matches_matmul():
    gen = np.random.default_rng(2)
    v, w, b = gen.standard_normal(5), gen.standard_normal((3, 5)), gen.standard_normal(3)
    out = ad.linear(ad.constant(v), ad.constant(w), ad.constant(b)).data
    assert np.abs(out - (w @ v + b)).max() < 1e-12


def test_sigmoid_values_saturated_stable():
    out = ad.sigmoid_values(np.array([-1000.0, 0.0, 1000.0]))
    assert np.array_equal(out, [0.0, 0.5, 1.0])
    assert np.isfinite(out).all()
    x = np.linspace(-20, 20, 41)
    assert np.abs(ad.sigmoid_values(x) + ad.sigmoid_values(-x) - 1.0).max() < 1e-15


# ---------------------------------------------------------------------------
# backward mechanics


def test_hand_example_sigmoid_slope_quarter():
    # loss = sigmoid(w * x) at w = 0, x = 1: dL/dw = sigmoid'(0) = 0.25
    w = ad.parameter(np.zeros(1), "w")
    x = ad.constant(np.ones(1))
    loss = ad.sum_all(ad.sigmoid(ad.mul(w, x)))
    ad.backward(loss)
    assert w.grad.shape == (1,)
    assert abs(float(w.grad[0]) - 0.25) < 1e-15


def test_reused_node_accumulates_both_paths():
    x = ad.parameter(np.array([3.0]), "x")
    y = ad.mul(x, x)  # d/dx = 2x = 6
    ad.backward(ad.sum_all(y))
    assert abs(float(x.grad[0]) - 6.0) < 1e-12

    x2 = ad.parameter(np.array([2.0]), "x2")
    z = ad.add(x2, x2)
    ad.backward(ad.sum_all(ad.mul(z, z)))  # (2x)^2, d/dx = 8x = 16
    assert abs(float(x2.grad[0]) - 16.0) < 1e-12


def test_diamond_graph_gradient():
    x = ad.parameter(np.array([1.5]), "x")
    a = ad.mul_scalar(x, 2.0)
    b = ad.mul_scalar(x, 3.0)
    ad.backward(ad.sum_all(ad.mul(a, b)))  # 6x^2 -> 12x = 18
    assert abs(float(x.grad[0]) - 18.0) < 1e-12
    err = fd_check(lambda: ad.sum_all(ad.mul(ad.mul_scalar(x, 2.0), ad.mul_scalar(x, 3.0))), [x])
    assert err < FD_TOL


def test_clamp_gradient_zero_outside_window():
    x = ad.parameter(np.array([-2.0, 0.0, 2.0]), "x")
    ad.backward(ad.sum_all(ad.clamp(x, -1.0, 1.0)))
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_grads_accumulate_across_backward_calls():
    x = ad.parameter(np.array([1.0]), "x")
    for _ in range(2):
        ad.backward(ad.sum_all(ad.mul_scalar(x, 5.0)))
    assert float(x.grad[0]) == 10.0
    x.zero_grad()
    assert x.grad is None


def test_constants_collect_no_grad():
    c = ad.constant(np.ones(3))
    x = ad.parameter(np.ones(3), "x")
    ad.backward(ad.sum_all(ad.mul(c, x)))
    assert c.grad is None and x.grad is not None


def test_backward_requires_scalar_terminal():
    x = ad.parameter(np.ones((2, 2)), "x")
    with pytest.raises(ContractError):
        ad.backward(ad.mul_scalar(x, 1.0))


def test_float32_stays_float32():
    x = ad.constant(np.ones((1, 1, 4, 4), dtype=np.float32))
    w = ad.constant(np.ones((1, 1, 3, 3), dtype=np.float32))
    b = ad.constant(np.zeros(1, dtype=np.float32))
    assert ad.conv2d(x, w, b, 1, 1).data.dtype == np.float32
    assert ad.silu(x).data.dtype == np.float32


def test_mixed_dtype_rejected():
    a = ad.constant(np.ones(3, dtype=np.float32))
    b = ad.constant(np.ones(3, dtype=np.float64))
    with pytest.raises(ContractError):
        ad.add(a, b)


# ---------------------------------------------------------------------------
# shape validation


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.add(ad.constant(np.ones(3)), ad.constant(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.conv2d(ad.constant(np.ones((1, 2, 4, 4))), ad.constant(np.ones((1, 3, 3, 3))), ad.constant(np.zeros(1)))
    with pytest.raises(ShapeError):
        ad.conv2d(ad.constant(np.ones((1, 1, 2, 2))), ad.constant(np.ones((1, 1, 5, 5))), ad.constant(np.zeros(1)))
    with pytest.raises(ShapeError):
        ad.group_norm(ad.constant(np.ones((1, 6, 2, 2))), 4, ad.constant(np.ones(6)), ad.constant(np.zeros(6)))
    with pytest.raises(ShapeError):
        ad.downsample_avg(ad.constant(np.ones((1, 1, 5, 5))), 2)
    with pytest.raises(ShapeError):
        ad.concat_channels(ad.constant(np.ones((1, 1, 2, 2))), ad.constant(np.ones((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        ad.linear(ad.constant(np.ones(3)), ad.constant(np.ones((2, 4))), ad.constant(np.zeros(2)))
    with pytest.raises(ContractError):
        ad.conv2d(ad.constant(np.ones((1, 1, 4, 4))), ad.constant(np.ones((1, 1, 3, 3))), ad.constant(np.zeros(1)), stride=0)


def test_group_count_largest_divisor():
    assert ad.group_count(16) == 8
    assert ad.group_count(12) == 6
    assert ad.group_count(8) == 8
    assert ad.group_count(7) == 7
    assert ad.group_count(10) == 5
    assert ad.group_count(1) == 1
    assert ad.group_count(64) == 8


# ---------------------------------------------------------------------------
# parameter store


def test_parameter_store_basics():
    store = ad.ParameterStore()
    a = store.create("layer.w", np.zeros((2, 2)))
    store.create("layer.b", np.zeros(2))
    assert store.names() == ["layer.w", "layer.b"]
    assert "layer.w" in store and len(store) == 2
    assert store["layer.w"] is a
    assert store.count_values() == 6
    with pytest.raises(ContractError):
        store.create("layer.w", np.zeros(1))


def test_parameter_store_zero_grads():
    store = ad.ParameterStore()
    t = store.create("p", np.ones(2))
    ad.backward(ad.sum_all(ad.mul_scalar(t, 2.0)))
    assert t.grad is not None
    store.zero_grads()
    assert t.grad is None


def test_parameter_store_load_round_trip():
    store = ad.ParameterStore()
    store.create("a", np.arange(4.0))
    store.create("b", np.ones((2, 3)))
    state = {k: v.copy() for k, v in store.state_arrays().items()}
    state["a"][:] = [9, 8, 7, 6]
    store.load_arrays(state)
    assert np.array_equal(store["a"].data, [9, 8, 7, 6])
    state["a"][0] = -1  # loaded arrays must be copies
    assert store["a"].data[0] == 9


def test_parameter_store_load_validates():
    store = ad.ParameterStore()
    store.create("a", np.zeros(2))
    with pytest.raises(ContractError):
        store.load_arrays({})
    with pytest.raises(ContractError):
        store.load_arrays({"a": np.zeros(2), "ghost": np.zeros(1)})
    with pytest.raises(ShapeError):
        store.load_arrays({"a": np.zeros(3)})
