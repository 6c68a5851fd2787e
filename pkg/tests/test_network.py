import numpy as np
import pytest

from gevnet.architecture import PUBLISHED_PARAMS, Architecture, count_params
from gevnet.errors import ResolutionError, ShapeMismatchError, UnsupportedTypeError
from gevnet.geometry import build_icosphere, build_rotation_plan, icosahedral_rotations, rot2, rotate_gauges
from gevnet.network import (
    Dense,
    GeometryContext,
    GlobalPool,
    Pool,
    RegularNonlinearity,
    SteerableConv,
    dense_head,
    gauge_transform_field,
    gevconv_backward,
    gevconv_forward,
    global_invariant_pool,
    pool_features,
    regular_nonlinearity,
    rotate_field,
)
from gevnet.reference import gevconv_naive, regular_nonlinearity_naive
from gevnet.steerable import RHO0, RHO01, RHO1, basis_first_order
from gevnet.verify import check_layer


@pytest.fixture(scope="module")
def ctx():
    return GeometryContext(1000)


def conv(c_in, rin, c_out, rout, order, level, ctx, seed=0, pairing="full", bias=True):
    layer = SteerableConv(c_in, rin, c_out, rout, order, level, bias, pairing)
    layer.init(np.random.default_rng(seed))
    if bias:
        layer.params["b"] = np.random.default_rng(seed + 1).standard_normal(layer.params["b"].shape)
    return layer


# -- convolution -------------------------------------------------------------------


def test_zero_input_zero_output(ctx):
    layer = conv(2, RHO01, 3, RHO01, 2, 1, ctx, bias=False)
    x = np.zeros((2, 42, 2, 3))
    np.testing.assert_array_equal(layer.forward(x, ctx), 0.0)


@pytest.mark.parametrize("tag", ["ring", "center"])
def test_constant_scalar_field_isotropic_kernel(ctx, tag):
    b1 = basis_first_order(RHO0, RHO0)
    idx = [e.tag for e in b1.elements].index(tag)
    params = {"w1": np.zeros((1, 1, 2))}
    params["w1"][0, 0, idx] = 1.0
    x = np.full((162, 1, 1), 2.5)
    y = gevconv_forward(ctx.conv_stencil(2, RHO0), params, x, RHO0)
    np.testing.assert_allclose(y, 2.5, rtol=1e-13)


@pytest.mark.parametrize(
    "rin,rout,order,pairing",
    [(RHO01, RHO01, 1, "full"), (RHO01, RHO01, 2, "full"), (RHO0, RHO01, 2, "diagonal"), (RHO1, RHO0, 2, "full")],
)
def test_matches_naive_level1(ctx, rin, rout, order, pairing):
    layer = conv(2, rin, 2, rout, order, 1, ctx, seed=3, pairing=pairing, bias=rout.n0 > 0)
    x = np.random.default_rng(4).standard_normal((42, 2, rin.dim))
    y = layer.forward(x, ctx)
    ref = gevconv_naive(ctx.grid(1), ctx.geometry(1), rin, rout, layer.params, x, Q=1000)
    np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)


def test_batch_and_single_agree(ctx):
    layer = conv(2, RHO01, 2, RHO0, 2, 1, ctx)
    x = np.random.default_rng(0).standard_normal((3, 42, 2, 3))
    yb = layer.forward(x, ctx)
    np.testing.assert_allclose(layer.forward(x[1], ctx), yb[1], atol=1e-14)


def test_conv_type_mismatch(ctx):
    layer = conv(2, RHO01, 2, RHO0, 1, 1, ctx)
    with pytest.raises(ShapeMismatchError):
        layer.forward(np.zeros((42, 2, 2)), ctx)


def test_zero_grad_out(ctx):
    layer = conv(2, RHO01, 2, RHO01, 2, 1, ctx)
    x = np.random.default_rng(0).standard_normal((42, 2, 3))
    grads, gx = gevconv_backward(ctx.conv_stencil(1, RHO01), layer.params, x, np.zeros((42, 2, 3)), RHO01)
    np.testing.assert_array_equal(gx, 0.0)
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


def test_linear_layer_gradient(ctx):
    layer = conv(2, RHO01, 2, RHO01, 1, 1, ctx)
    rng = np.random.default_rng(5)
    errs = check_layer(layer, rng.standard_normal((2, 42, 2, 3)), ctx, False, rng)
    assert max(errs.values()) <= 1e-6


@pytest.mark.parametrize("pairing", ["full", "diagonal"])
def test_second_order_gradient(ctx, pairing):
    layer = conv(2, RHO01, 2, RHO01, 2, 1, ctx, pairing=pairing)
    rng = np.random.default_rng(6)
    errs = check_layer(layer, rng.standard_normal((2, 42, 2, 3)), ctx, False, rng)
    assert max(errs.values()) <= 1e-4


@pytest.mark.parametrize("order", [1, 2])
def test_gauge_equivariance(ctx, order):
    rng = np.random.default_rng(7)
    grid = ctx.grid(2)
    alpha = rng.uniform(0, 2 * np.pi, grid.num_vertices)
    ctx2 = ctx.with_gauges(2, rotate_gauges(grid.gauge_frames, alpha))
    layer = conv(2, RHO01, 2, RHO01, order, 2, ctx)
    x = rng.standard_normal((grid.num_vertices, 2, 3))
    y = layer.forward(x, ctx)
    y2 = layer.forward(gauge_transform_field(x, alpha, RHO01), ctx2)
    np.testing.assert_allclose(y2, gauge_transform_field(y, alpha, RHO01), atol=1e-10)


# -- nonlinearity --------------------------------------------------------------------


def test_scalar_nonlinearity_is_relu():
    x = np.random.default_rng(0).standard_normal((2, 12, 3, 1))
    np.testing.assert_allclose(regular_nonlinearity(x, RHO0, 7), np.maximum(x, 0), atol=1e-15)


def test_nonnegative_band_is_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((12, 2, 3))
    x[..., 0] = np.linalg.norm(x[..., 1:], axis=-1) + rng.uniform(0, 1, (12, 2))
    np.testing.assert_allclose(regular_nonlinearity(x, RHO01, 11), x, atol=1e-14)


def test_four_sample_example():
    x = np.array([0.0, 1.0, 0.0]).reshape(1, 1, 3)
    np.testing.assert_allclose(regular_nonlinearity(x, RHO01, 4)[0, 0], [0.25, 0.5, 0.0], atol=1e-15)


def test_too_few_samples():
    with pytest.raises(ResolutionError):
        regular_nonlinearity(np.zeros((1, 1, 3)), RHO01, 2)


def test_vector_only_type_rejected():
    with pytest.raises(UnsupportedTypeError):
        regular_nonlinearity(np.zeros((1, 1, 2)), RHO1, 5)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_nonlinearity_matches_naive(mode):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 12, 2, 3))
    ph = rng.uniform(0, 2 * np.pi, 12)
    affine = (rng.uniform(0.5, 1.5, (2, 1)), rng.standard_normal((2, 1)))
    running = {"mean": rng.uniform(0, 1, (2, 1)), "var": rng.uniform(0.5, 2, (2, 1))}
    mean, var = (running["mean"].copy(), running["var"].copy()) if mode == "eval" else (None, None)
    y = regular_nonlinearity(x, RHO01, 9, affine, mode, running, ph)
    ref = regular_nonlinearity_naive(x, RHO01, 9, affine, mean, var, ph)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_nonlinearity_gauge_exact_for_sample_shifts():
    N = 9
    rng = np.random.default_rng(3)
    x = rng.standard_normal((12, 2, 3))
    ph = rng.uniform(0, 2 * np.pi, 12)
    alpha = 2 * np.pi * rng.integers(0, N, 12) / N
    y = regular_nonlinearity(x, RHO01, N, phases=ph)
    y2 = regular_nonlinearity(gauge_transform_field(x, alpha, RHO01), RHO01, N, phases=ph)
    np.testing.assert_allclose(y2, gauge_transform_field(y, alpha, RHO01), atol=1e-13)
    # generic angles are only approximately equivariant; the error is finite but not bounded here
    beta = rng.uniform(0, 2 * np.pi, 12)
    y3 = regular_nonlinearity(gauge_transform_field(x, beta, RHO01), RHO01, N, phases=ph)
    assert np.isfinite(np.max(np.abs(y3 - gauge_transform_field(y, beta, RHO01))))


@pytest.mark.parametrize("train", [True, False])
def test_nonlinearity_gradient(ctx, train):
    layer = RegularNonlinearity(2, RHO01, 1, N=7)
    rng = np.random.default_rng(4)
    layer.params["bn_scale"] = rng.uniform(0.5, 1.5, (2, 1))
    layer.params["bn_shift"] = rng.standard_normal((2, 1))
    errs = check_layer(layer, rng.standard_normal((2, 42, 2, 3)), ctx, train, rng)
    assert max(errs.values()) <= 1e-4


def test_train_mode_updates_running_stats(ctx):
    layer = RegularNonlinearity(1, RHO01, 1, N=7)
    x = np.random.default_rng(5).standard_normal((2, 42, 1, 3)) + 1.0
    layer.forward(x, ctx, train=True)
    assert np.all(layer.buffers["mean"] > 0)
    before = layer.buffers["mean"].copy()
    layer.forward(x, ctx, train=False)
    np.testing.assert_array_equal(layer.buffers["mean"], before)


# -- pooling -------------------------------------------------------------------------


def test_pool_constant(ctx):
    step = ctx.pool_step(2)
    y = pool_features(step, np.full((162, 2, 1), 3.0), RHO0)
    np.testing.assert_allclose(y, 3.0, rtol=1e-14)
    assert y.shape == (42, 2, 1)


def test_pool_own_position(ctx):
    step = ctx.pool_step(2)
    assert np.all(step.nbr[:, 0] == np.arange(42))
    np.testing.assert_array_equal(step.transport[:, 0], 0.0)
    x = np.zeros((162, 1, 2))
    x[5, 0] = [0.3, -0.7]
    y = pool_features(step, x, RHO1)
    expect = np.zeros((42, 1, 2))
    expect[5, 0] = step.weights[5, 0] * np.array([0.3, -0.7])
    np.testing.assert_allclose(y, expect, atol=1e-15)


def test_pool_matches_loop(ctx):
    step = ctx.pool_step(2)
    x = np.random.default_rng(0).standard_normal((162, 2, 3))
    y = pool_features(step, x, RHO01)
    ref = np.zeros((42, 2, 3))
    for c in range(42):
        for j in range(step.nbr.shape[1]):
            if not step.mask[c, j]:
                continue
            R = np.eye(3)
            R[1:, 1:] = rot2(step.transport[c, j])
            for ch in range(2):
                ref[c, ch] += step.weights[c, j] * (R @ x[step.nbr[c, j], ch])
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_pool_level_mismatch(ctx):
    with pytest.raises(ShapeMismatchError):
        pool_features(ctx.pool_step(2), np.zeros((42, 1, 1)), RHO0)


def test_pool_gradient(ctx):
    rng = np.random.default_rng(1)
    errs = check_layer(Pool(RHO01, 2), rng.standard_normal((2, 162, 2, 3)), ctx, False, rng)
    assert max(errs.values()) <= 1e-6


# -- global pool and dense head ------------------------------------------------------


def test_global_pool():
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(global_invariant_pool(np.full((2, 42, 3, 1), 1.5), RHO0), 1.5)
    f, g = rng.standard_normal((2, 2, 42, 3, 1))
    lhs = global_invariant_pool(2 * f - 3 * g, RHO0)
    rhs = 2 * global_invariant_pool(f, RHO0) - 3 * global_invariant_pool(g, RHO0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)
    with pytest.raises(UnsupportedTypeError):
        global_invariant_pool(np.zeros((42, 1, 3)), RHO01)


def test_global_pool_icosahedral_invariance():
    grid = build_icosphere(2)
    f = np.random.default_rng(1).standard_normal((grid.num_vertices, 2, 1))
    for R in icosahedral_rotations()[:10]:
        g = rotate_field(build_rotation_plan(R, grid), f, RHO0)
        np.testing.assert_allclose(global_invariant_pool(g, RHO0), global_invariant_pool(f, RHO0), atol=1e-15)


def test_global_pool_gradient(ctx):
    rng = np.random.default_rng(2)
    errs = check_layer(GlobalPool(RHO0), rng.standard_normal((2, 42, 3, 1)), ctx, False, rng)
    assert max(errs.values()) <= 1e-6


def test_dense_head():
    b = np.arange(4.0)
    np.testing.assert_array_equal(dense_head({"W": np.ones((4, 3)), "b": b}, np.zeros((2, 3))), [b, b])
    v = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_allclose(dense_head({"W": np.eye(4), "b": b}, v), v + b)
    with pytest.raises(ShapeMismatchError):
        dense_head({"W": np.eye(4), "b": b}, np.zeros((2, 3)))


def test_dense_gradient(ctx):
    rng = np.random.default_rng(3)
    layer = Dense(4, 3)
    layer.init(rng)
    layer.params["b"] = rng.standard_normal(3)
    errs = check_layer(layer, rng.standard_normal((5, 4)), ctx, False, rng)
    assert max(errs.values()) <= 1e-6


# -- gauge transforms and rotations ----------------------------------------------------


def test_gauge_transform_identities():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 12, 3, 3))
    np.testing.assert_array_equal(gauge_transform_field(x, np.zeros(12), RHO01), x)
    np.testing.assert_allclose(gauge_transform_field(x, np.full(12, 2 * np.pi), RHO01), x, atol=1e-15)
    a, b = rng.uniform(0, 2 * np.pi, (2, 12))
    two = gauge_transform_field(gauge_transform_field(x, a, RHO01), b, RHO01)
    np.testing.assert_allclose(two, gauge_transform_field(x, a + b, RHO01), atol=1e-14)
    np.testing.assert_array_equal(gauge_transform_field(x, a, RHO01)[..., 0], x[..., 0])
    with pytest.raises(ShapeMismatchError):
        gauge_transform_field(x, np.zeros(11), RHO01)


def test_rotate_identity():
    grid = build_icosphere(2)
    x = np.random.default_rng(0).standard_normal((grid.num_vertices, 2, 3))
    np.testing.assert_allclose(rotate_field(build_rotation_plan(np.eye(3), grid), x, RHO01), x, atol=1e-14)


def test_icosahedral_rotation_constant_and_inverse():
    grid = build_icosphere(2)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((grid.num_vertices, 2, 3))
    c = np.full((grid.num_vertices, 1, 1), 0.7)
    for R in icosahedral_rotations()[rng.choice(60, 8, replace=False)]:
        np.testing.assert_allclose(rotate_field(build_rotation_plan(R, grid), c, RHO0), c, rtol=1e-14)
        back = rotate_field(build_rotation_plan(R.T, grid), rotate_field(build_rotation_plan(R, grid), x, RHO01), RHO01)
        np.testing.assert_allclose(back, x, atol=1e-13)


# -- parameter accounting --------------------------------------------------------------


def test_unit_architecture_count():
    assert SteerableConv(1, RHO0, 1, RHO0, 1, 1, bias=False).num_params() == 2


def test_two_layer_counts_by_hand():
    # conv1 w1 + w2 (full) + bias, two-unit affine, conv2 w1 + w2 + bias, Dense(2, 52), Dense(52, 10)
    gevnet = (2 * 1 * 4 + 2 * 1 * 1 * 12 + 2) + 2 * 2 + (2 * 2 * 4 + 2 * 2 * 2 * 8 + 2) + (2 * 52 + 52) + (52 * 10 + 10)
    genet = (2 * 1 * 4 + 2) + 2 * 2 + (4 * 2 * 4 + 4) + (4 * 52 + 52) + (52 * 10 + 10)
    assert count_params("gevnet2") == gevnet == 806
    assert count_params("genet2") == genet == 840


@pytest.mark.parametrize("name", sorted(PUBLISHED_PARAMS))
def test_counts_near_published(name):
    n = count_params(Architecture.preset(name))
    assert abs(n - PUBLISHED_PARAMS[name]) <= 0.15 * PUBLISHED_PARAMS[name]
