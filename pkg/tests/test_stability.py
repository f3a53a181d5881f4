import numpy as np
import pytest

from continuation import solve_scalar_all
from meanfield import build_system, fixed_point_record
from model import build_model
from stability import (
    SecularFunction,
    SecularRoot,
    StabilitySettings,
    _roots_from_power_sums,
    classify,
    dense_secular_check,
    eigvec_at_one,
    eigvec_residual,
    linearize,
)
from transfer import Density


def test_linearization_preserves_mass(system_1d, fixed_point_1d):
    lin = linearize(system_1d, fixed_point_1d)
    rng = np.random.default_rng(4)
    phi = Density(system_1d.basis, rng.standard_normal(system_1d.basis.size) + 0j)
    assert lin.apply(phi).mass == pytest.approx(phi.mass, abs=1e-12)
    np.testing.assert_allclose(lin.apply_coeffs(phi.coeffs), lin.apply(phi).coeffs, atol=1e-13)


def test_secular_value_at_one_is_gamma(system_1d, fixed_point_1d):
    secular = SecularFunction(system_1d, linearize(system_1d, fixed_point_1d))
    assert secular(1.0) == pytest.approx(fixed_point_1d.gamma, abs=1e-8)
    assert secular.exact(1.0) == pytest.approx(fixed_point_1d.gamma, abs=1e-8)


def test_eigenvector_at_one(system_1d, fixed_point_1d):
    lin = linearize(system_1d, fixed_point_1d)
    phi = eigvec_at_one(system_1d, fixed_point_1d)
    assert eigvec_residual(lin, phi) < 1e-8


def test_secular_roots_match_dense_eigenvalues(system_1d, fixed_point_1d):
    outcome = dense_secular_check(system_1d, fixed_point_1d, StabilitySettings(inner_radius=0.2))
    assert outcome["max_distance"] < 1e-8
    assert not outcome["unmatched_dense"]
    assert not outcome["unmatched_secular"]


def test_small_coupling_fixed_point_is_physical(system_1d, fixed_point_1d):
    report = classify(system_1d, fixed_point_1d)
    assert report.classification == "physical"
    assert report.circle_sup < 1.0
    assert report.xi1_gamma_defect < 1e-8
    assert report.eigvec_at_one is not None
    assert set(report.to_dict()) >= {"secular_roots", "leading_eig", "kappa", "contour"}


def test_zero_coupling_strength_has_no_secular_roots():
    system = build_system(build_model({"mu": 0.0}), 12)
    report = classify(system, fixed_point_record(system, 10.0, 1.0))
    assert report.secular_roots == ()
    assert report.classification == "physical"
    assert report.circle_sup == 0.0


def test_root_kinds():
    assert SecularRoot(0.9 + 0j, 0.0).kind == "fold"
    assert SecularRoot(-1.2 + 0j, 0.0).kind == "flip"
    assert SecularRoot(0.5 + 0.5j, 0.0).kind == "complex"


def test_power_sums_recover_polynomial_roots():
    # roots 2 and -3: s0 = 2, s1 = -1, s2 = 13
    roots = _roots_from_power_sums(np.array([2.0, -1.0, 13.0], dtype=complex))
    np.testing.assert_allclose(np.sort(roots.real), [-3.0, 2.0], atol=1e-12)


@pytest.mark.parametrize("nu", [0.0, 5.0, 10.0, 15.0, 20.0, 25.0])
def test_small_coupling_has_a_unique_physical_state(system_2d, nu):
    roots = solve_scalar_all(system_2d, nu)
    assert len(roots) == 1
    assert classify(system_2d, fixed_point_record(system_2d, nu, roots[0])).classification == "physical"


def test_three_solution_window_has_two_physical_states(system_2d):
    roots = solve_scalar_all(system_2d, 80.0)
    reports = [classify(system_2d, fixed_point_record(system_2d, 80.0, omega)) for omega in roots]
    assert len(roots) == 3
    assert [report.classification for report in reports] == ["physical", "unstable", "physical"]


@pytest.mark.parametrize("nu", [30.0, 80.0, 100.0, 150.0])
def test_physical_states_are_those_with_contracting_response(system_2d, nu):
    roots = solve_scalar_all(system_2d, nu)
    assert len(roots) % 2 == 1
    for omega in roots:
        record = fixed_point_record(system_2d, nu, omega)
        assert (classify(system_2d, record).classification == "physical") == (abs(record.gamma) < 1.0)
