import math
from dataclasses import replace

import numpy as np
import pytest

from errors import ConfigError, NonHyperbolic, RhoNotDiffeo, ZeroLattice
from meanfield import build_system, frozen_srb
from model import (
    TWO_PI,
    alpha_values,
    apply_coupled_map,
    apply_linear,
    build_model,
    coefficients_ab,
    invert_rho,
    leading_order_mean_field,
    perturbative_density,
    rho,
    rho_jacobian,
    to_torus,
    torus_distance,
)


def test_default_model_is_the_anosov_family(model_2d):
    assert model_2d.dim == 2
    assert model_2d.A == ((2, 1), (1, 1))
    assert model_2d.n_star == 10
    assert model_2d.k == (0, 1)
    assert model_2d.nu_max == pytest.approx(1.0 / 0.05**2)


def test_one_dimensional_defaults(model_1d):
    assert model_1d.A == ((2,),)
    assert model_1d.mu == pytest.approx(0.3)
    assert model_1d.theta == pytest.approx(0.5 * math.pi)


@pytest.mark.parametrize(
    "config, error",
    [
        ({"A": [[1, 1], [0, 1]]}, NonHyperbolic),
        ({"A": [[2, 1], [1, 2]]}, NonHyperbolic),
        ({"mu": 1.0}, RhoNotDiffeo),
        ({"k": [0, 0]}, ZeroLattice),
        ({"dim": 3}, ConfigError),
        ({"beta_mode": "sideways"}, ConfigError),
        ({"dim": 1, "A": [[1]]}, NonHyperbolic),
    ],
)
def test_invalid_models_are_rejected(config, error):
    with pytest.raises(error) as info:
        build_model(config)
    assert info.value.exit_code == 2


def test_rho_inverse_round_trip(model_2d, model_1d):
    rng = np.random.default_rng(3)
    for model in (model_2d, model_1d):
        y = rng.uniform(0.0, TWO_PI, size=(400, model.dim))
        x = invert_rho(model, y)
        assert np.max(torus_distance(to_torus(rho(model, x)), y)) < 1e-12


def test_inverse_jacobian_expansion_is_third_order(model_2d):
    small = replace(model_2d, mu=1e-2)
    y = np.random.default_rng(0).uniform(0.0, TWO_PI, size=(256, 2))
    x = invert_rho(small, y, wrap=False)
    a, b = coefficients_ab(small, y)
    error = np.max(np.abs(1.0 / rho_jacobian(small, x) - (1.0 + small.mu * a + small.mu**2 * b)))
    assert error <= 20.0 * small.mu**3


def test_to_torus_never_returns_two_pi():
    assert to_torus(np.array([-1e-20]))[0] == 0.0
    assert to_torus(np.array([TWO_PI + 0.5]))[0] == pytest.approx(0.5)


def test_alpha_stays_in_range(model_2d):
    x = np.random.default_rng(1).uniform(0.0, TWO_PI, size=(1000, 2))
    values = alpha_values(model_2d, x)
    assert values.min() >= 0.0
    assert values.max() <= 2.0


def test_uncoupled_linear_map():
    model = build_model({"n_star": 1, "mu": 0.0})
    image = apply_coupled_map(model, 0.0, 1.0, np.array([[0.1, 0.2]]))
    np.testing.assert_allclose(image, [[0.4, 0.3]], atol=1e-15)


def test_shift_moves_along_beta():
    model = build_model({"n_star": 1, "mu": 0.0})
    x = np.array([[0.1, 0.2]])
    shifted = apply_coupled_map(model, 2.0, 0.25, x)
    plain = apply_coupled_map(model, 0.0, 0.25, x)
    np.testing.assert_allclose(shifted - plain, [0.5 * model.beta], atol=1e-14)


def test_leading_order_law_at_zero_coupling(model_2d):
    m0, g0 = leading_order_mean_field(model_2d, 0.0, 1.0)
    assert m0 == pytest.approx(1.0 + 0.5 * model_2d.mu * math.cos(model_2d.theta))
    assert g0 == 0.0


def test_perturbative_density_error_is_third_order(model_1d):
    errors = []
    for mu in (0.05, 0.025):
        system = build_system(replace(model_1d, mu=mu), 32)
        exact = frozen_srb(system, 2.0, 1.0)
        errors.append((perturbative_density(system.model, 2.0, 1.0, basis=system.basis) - exact).norm())
    assert errors[0] / errors[1] > 5.0


def test_inverse_of_the_origin():
    model = build_model({"mu": 0.05, "k": [0, 1]})
    np.testing.assert_allclose(invert_rho(model, np.array([0.0, 0.0]), wrap=False), [-0.05, 0.0], atol=1e-12)


def test_map_stays_within_the_conjugacy_displacement(model_2d):
    x = np.random.default_rng(2).uniform(0.0, TWO_PI, size=(4096, 2))
    nu, omega = 7.0, 1.01
    image = apply_coupled_map(model_2d, nu, omega, x)
    preimage = invert_rho(model_2d, x)
    # ρ and ρ⁻¹ each move a point by at most μ per axis
    assert np.max(torus_distance(preimage, x)) <= model_2d.mu + 1e-12
    linear = to_torus(apply_linear(model_2d, preimage) + nu * omega * model_2d.beta)
    assert np.max(torus_distance(image, linear)) <= model_2d.mu + 1e-12


def test_linear_part_is_the_matrix_power(model_2d):
    x = np.random.default_rng(5).uniform(0.0, TWO_PI, size=(64, 2))
    expected = to_torus(x @ model_2d.power.T.astype(float))
    assert np.max(torus_distance(apply_linear(model_2d, x), expected)) < 1e-8


def test_inversion_converges_pointwise(model_2d):
    y = np.random.default_rng(6).uniform(0.0, TWO_PI, size=(3, 5, 2))
    x = invert_rho(model_2d, y)
    assert x.shape == (3, 5, 2)
    np.testing.assert_array_equal(x[1], invert_rho(model_2d, y[1]))
