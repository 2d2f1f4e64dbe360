import math

import numpy as np
import pytest

from ezmsg.fedhe.approx import (
    MAX_DEGREE,
    ApproxPoly,
    activation,
    approx_max,
    bsgs_mul_count,
    canonical_name,
    eval_poly_encrypted,
    fit_chebyshev,
    fit_least_squares,
    max_pool,
)
from ezmsg.fedhe.errors import ApproximationError, LevelExhaustedError


def test_canonical_names() -> None:
    assert canonical_name('ReLU') == 'sqrt_relu'
    assert canonical_name('smooth_relu') == 'softplus'
    assert canonical_name('linear') == 'identity'
    with pytest.raises(ApproximationError):
        canonical_name('swish')


@pytest.mark.parametrize('degree, muls', [(3, 2), (7, 5), (15, 7), (31, 12)])
def test_bsgs_mul_count(degree: int, muls: int) -> None:
    assert bsgs_mul_count(degree) == muls


def test_fits_improve_with_degree() -> None:
    low = fit_least_squares('sigmoid', (-8, 8), 3)
    high = fit_least_squares('sigmoid', (-8, 8), 7)
    assert low.target == 'sigmoid'
    assert low.degree == 3
    assert high.fit_error < low.fit_error < 0.2

    x = np.linspace(-8, 8, 101)
    tanh = fit_chebyshev('tanh', (-3, 3), 15)
    np.testing.assert_allclose(tanh(x[np.abs(x) <= 3]), np.tanh(x[np.abs(x) <= 3]), atol = 2 * tanh.fit_error + 1e-9)
    assert tanh.fit_error < 5e-2


def test_fit_rejects_bad_input() -> None:
    with pytest.raises(ApproximationError):
        fit_chebyshev('sigmoid', (1, -1), 3)
    with pytest.raises(ApproximationError):
        fit_least_squares('sigmoid', (-1, 1), MAX_DEGREE + 1)
    with pytest.raises(ApproximationError):
        activation('sigmoid', mode = 'integral')
    with pytest.raises(ApproximationError):
        activation('sigmoid', method = 'remez')
    with pytest.raises(ApproximationError):
        ApproxPoly((1.0, 2.0), basis = 'legendre')


def test_custom_targets_are_fitted() -> None:
    def cube(x):
        return np.asarray(x) ** 3

    poly = fit_chebyshev(cube, (-2, 2), 3)
    assert poly.target == 'cube'
    assert poly.fit_error < 1e-9


def test_derivatives() -> None:
    d = activation('tanh', 'derivative', degree = 7, interval = (-3, 3), method = 'chebyshev')
    assert d.mode == 'derivative'
    assert d.degree == 6
    x = np.linspace(-3, 3, 50)
    np.testing.assert_allclose(d(x), 1.0 - np.tanh(x) ** 2, atol = 2 * d.fit_error + 1e-9)

    # Softplus differentiates to a fresh sigmoid fit
    s = activation('softplus', 'derivative', degree = 3)
    assert s.target == 'sigmoid'
    assert s.degree == 2

    assert activation('relu').target == 'sqrt_relu'
    square = activation('square', degree = 7)
    assert square.degree == 2
    np.testing.assert_allclose(square(x), x * x, atol = 1e-9)


def test_power_basis_and_scaling() -> None:
    p = ApproxPoly((1.0, 0.0, 2.0), basis = 'power')
    x = np.linspace(-1, 1, 9)
    np.testing.assert_allclose(p(x), 1.0 + 2.0 * x * x)
    np.testing.assert_allclose(p.scaled(0.5)(x), 0.5 + x * x)
    assert p.depth == 2


def test_config_round_trip() -> None:
    poly = activation('sigmoid', degree = 3)
    assert ApproxPoly.from_config(poly.to_config()) == poly
    with pytest.raises(ApproximationError):
        ApproxPoly.from_config({'interval': [-1, 1]})


@pytest.mark.parametrize('degree', [3, 5, 7, 15, 31])
def test_encrypted_evaluation_uses_depth_levels(keyed, rng: np.random.Generator, degree: int) -> None:
    ctx, shares = keyed
    poly = ApproxPoly(tuple(rng.uniform(-0.5, 0.5, size = degree + 1)))
    values = rng.uniform(-1, 1, size = ctx.slots)
    out = eval_poly_encrypted(ctx, ctx.encrypt_values(ctx.keys.public, values), poly)
    assert out.level == ctx.top_level - poly.depth
    assert ctx.counters.mul_ct == bsgs_mul_count(degree)
    np.testing.assert_allclose(ctx.decrypt_values(out, shares), poly(values), atol = 1e-3)


def test_encrypted_activation_over_its_interval(keyed, rng: np.random.Generator) -> None:
    ctx, shares = keyed
    poly = activation('sigmoid', degree = 3)
    values = rng.uniform(-8, 8, size = ctx.slots)
    out = eval_poly_encrypted(ctx, ctx.encrypt_values(ctx.keys.public, values), poly)
    # The map onto [-1, 1] rides in the scale label
    assert ctx.top_level - out.level == 2
    assert out.scale == pytest.approx(ctx.canonical_scale(out.level))
    np.testing.assert_allclose(ctx.decrypt_values(out, shares), poly(values), atol = 1e-3)


@pytest.mark.parametrize('degree', [3, 5, 7, 15, 31])
@pytest.mark.parametrize('interval', [(-8.0, 8.0), (0.0, 4.0), (-0.5, 0.25)])
def test_folded_interval_keeps_the_depth(reference, rng: np.random.Generator, degree: int, interval) -> None:
    ctx, shares = reference
    poly = ApproxPoly(tuple(rng.uniform(-0.5, 0.5, size = degree + 1)), interval)
    values = rng.uniform(*interval, size = ctx.slots)
    out = eval_poly_encrypted(ctx, ctx.encrypt_values(ctx.keys.public, values), poly)
    assert out.level == ctx.top_level - poly.depth
    assert out.scale == pytest.approx(ctx.canonical_scale(out.level))
    assert ctx.counters.mul_ct == bsgs_mul_count(degree)
    np.testing.assert_allclose(ctx.decrypt_values(out, shares), poly(values), atol = 1e-9)


def test_encrypted_evaluation_needs_levels(reference) -> None:
    ctx, _ = reference
    poly = ApproxPoly(tuple(np.ones(8)))
    with pytest.raises(LevelExhaustedError):
        eval_poly_encrypted(ctx, ctx.encrypt_values(ctx.keys.public, 0.5, level = 2), poly)
    with pytest.raises(ApproximationError):
        eval_poly_encrypted(ctx, ctx.encrypt_values(ctx.keys.public, 0.5), ApproxPoly(tuple(np.ones(MAX_DEGREE + 2))))


def test_approx_max(reference, rng: np.random.Generator) -> None:
    ctx, shares = reference
    sqrt_poly = fit_chebyshev('sqrt', (0, 1), MAX_DEGREE)
    a_vals, b_vals = rng.uniform(-0.5, 0.5, size = (2, ctx.slots))
    pk = ctx.keys.public
    out = approx_max(ctx, ctx.encrypt_values(pk, a_vals), ctx.encrypt_values(pk, b_vals), sqrt_poly)
    np.testing.assert_allclose(ctx.decrypt_values(out, shares), np.maximum(a_vals, b_vals), atol = 5e-3)


def test_max_keeps_seven_bits_on_the_unit_square(reference, rng: np.random.Generator) -> None:
    sqrt_poly = fit_chebyshev('sqrt', (0, 1), MAX_DEGREE)
    # The series tail at 0 bounds the square root error
    assert sqrt_poly.fit_error <= 2 / (math.pi * (2 * MAX_DEGREE + 1)) + 1e-3

    grid = np.linspace(0, 1, 100)
    a, b = np.meshgrid(grid, grid)
    approx = 0.5 * (a + b) + 0.5 * sqrt_poly((a - b) ** 2)
    assert np.abs(approx - np.maximum(a, b)).max() <= 2 ** -7

    ctx, shares = reference
    a_vals, b_vals = rng.uniform(0, 1, size = (2, ctx.slots))
    b_vals[:4] = a_vals[:4]
    pk = ctx.keys.public
    out = approx_max(ctx, ctx.encrypt_values(pk, a_vals), ctx.encrypt_values(pk, b_vals), sqrt_poly)
    assert np.abs(ctx.decrypt_values(out, shares) - np.maximum(a_vals, b_vals)).max() <= 2 ** -7


def test_max_pool(reference, rng: np.random.Generator) -> None:
    ctx, shares = reference
    sqrt_poly = fit_chebyshev('sqrt', (0, 1), MAX_DEGREE)
    image = rng.uniform(-0.5, 0.5, size = (4, 4))
    ct = ctx.encrypt_values(ctx.keys.public, image.ravel())
    out = max_pool(ctx, ct, 4, 2, sqrt_poly, lambda c: ctx.d_bootstrap(c, shares))
    pooled = ctx.decrypt_values(out, shares)
    for r in (0, 2):
        for c in (0, 2):
            assert pooled[4 * r + c] == pytest.approx(image[r: r + 2, c: c + 2].max(), abs = 1e-2)
    assert ctx.counters.bootstraps == 2
    with pytest.raises(ApproximationError):
        max_pool(ctx, ct, 4, 3, sqrt_poly, lambda c: c)


def test_degree_depth_relation() -> None:
    for degree in (1, 3, 7, 15, 31):
        poly = ApproxPoly(tuple(np.ones(degree + 1)))
        assert poly.depth == math.ceil(math.log2(degree + 1))
