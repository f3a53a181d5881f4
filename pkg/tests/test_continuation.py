import math

import numpy as np
import pytest

from continuation import (
    Branch,
    BranchPoint,
    ContinuationSettings,
    FSystem,
    build_certificate,
    certify_point,
    count_solutions,
    fold_bracket,
    leading_order_roots,
    match_branch_roots,
    newton_corrector,
    scalar_system,
    solve_scalar_all,
    starting_point,
    trace_branch,
)
from errors import ContractionViolated, OutsideCertificate
from meanfield import build_system, mean_field_map
from model import build_model
from stability import StabilitySettings, classify, fold_root_slope

LINEAR = FSystem(lambda x, lam: x - lam, lambda x, lam: np.eye(1), lambda x, lam: -np.ones(1))
QUADRATIC = FSystem(lambda x, lam: x**2 - lam, lambda x, lam: np.diag(2.0 * x), lambda x, lam: -np.ones(1))


def test_linear_benchmark_converges_in_one_step():
    cert = build_certificate(LINEAR, [1.0], 1.0, 0.2)
    assert cert.upsilon == pytest.approx(1.0)
    assert cert.contraction == pytest.approx(0.0)
    result = newton_corrector(LINEAR, [1.0], 1.05, cert)
    assert result.iterations == 1
    assert result.x[0] == pytest.approx(1.05)


def test_quadratic_benchmark_inside_the_certified_interval():
    cert = build_certificate(QUADRATIC, [1.0], 1.0, 0.2)
    assert cert.delta1 == pytest.approx(0.2)
    for lam in np.linspace(1.0 - cert.delta1, 1.0 + cert.delta1, 9):
        result = newton_corrector(QUADRATIC, [1.0], lam, cert, tol=1e-14)
        assert result.x[0] == pytest.approx(math.sqrt(lam), abs=1e-12)
        assert result.contraction <= 0.5


def test_corrector_refuses_parameters_outside_the_certificate():
    cert = build_certificate(QUADRATIC, [1.0], 1.0, 0.2)
    with pytest.raises(OutsideCertificate):
        newton_corrector(QUADRATIC, [1.0], 1.0 + 2.0 * cert.delta1, cert)


def test_certificate_needs_a_contracting_radius():
    with pytest.raises(ContractionViolated):
        build_certificate(QUADRATIC, [1.0], 1.0, 2.0, max_shrink=1)


def test_corrector_detects_expansion():
    with pytest.raises(ContractionViolated):
        newton_corrector(LINEAR, [0.0], 1.0, slope=[[0.4]])


def test_certificate_of_the_reduced_equation(system_1d, fixed_point_1d):
    nu, omega = fixed_point_1d.nu, fixed_point_1d.omega
    cert = certify_point(system_1d, nu, omega)
    assert cert.contraction <= 0.5
    assert 0.0 < cert.closed_form_delta1 <= cert.closed_form_delta
    lam = nu + 0.5 * min(cert.delta1, cert.delta)
    result = newton_corrector(scalar_system(system_1d, lam), [omega], lam, cert)
    assert abs(result.x[0] - mean_field_map(system_1d, lam, result.x[0])) < 1e-11


def test_small_coupling_branch_is_a_graph(system_1d):
    branch = trace_branch(system_1d, (0.0, 3.0), starting_point(system_1d))
    nus = [point.nu for point in branch.points]
    assert not branch.folds
    assert nus[0] == 0.0
    assert nus[-1] == 3.0
    assert all(b > a for a, b in zip(nus, nus[1:]))
    assert max(point.residual for point in branch.points) < 1e-10

    roots = solve_scalar_all(system_1d, 2.0, points=512)
    refined, unmatched = match_branch_roots(system_1d, branch, 2.0, roots)
    assert len(roots) == 1
    assert not unmatched
    assert refined[0] == pytest.approx(roots[0], abs=1e-8)


def test_root_scans_at_zero_coupling(model_2d, system_2d):
    assert leading_order_roots(model_2d, 0.0) == [pytest.approx(1.0 + 0.5 * model_2d.mu, abs=1e-10)]
    assert count_solutions(system_2d, 0.0, points=256) == 1
    flat = build_system(build_model({"mu": 0.0}), 12)
    assert solve_scalar_all(flat, 30.0) == [pytest.approx(1.0)]


def _point(nu, stability, fold=False):
    return BranchPoint(tau=nu, nu=nu, omega=1.0, gamma=0.0, xi1=0j, residual=0.0, fold_flag=fold, stability=stability)


def test_stability_changes_are_tagged():
    points = [
        _point(0.0, "physical"),
        _point(1.0, "physical"),
        _point(1.5, "marginal", fold=True),
        _point(2.0, "unstable"),
        _point(3.0, "physical"),
    ]
    branch = Branch(points, [], {})
    assert branch.stability_changes() == [(1, 3, "fold"), (3, 4, "flip")]
    assert branch.summary()["stability_changes"][1]["kind"] == "flip"


def test_branch_crossings_of_a_vertical_line():
    points = [_point(0.0, None), _point(2.0, None)]
    points[1].omega = 1.2
    assert Branch(points, [], {}).omegas_at(1.0) == [pytest.approx(1.1)]


def test_frame_columns(system_1d):
    branch = trace_branch(system_1d, (0.0, 1.0), starting_point(system_1d))
    frame = branch.to_frame()
    assert {"tau", "nu", "omega", "gamma", "xi1_re", "fold_flag", "chart"} <= set(frame.columns)
    assert len(frame) == len(branch.points)


@pytest.mark.slow
def test_first_fold_of_the_two_dimensional_branch(model_2d):
    system = build_system(model_2d, 12)
    branch = trace_branch(system, (0.0, 60.0), starting_point(system), ContinuationSettings())
    assert branch.folds
    fold = branch.folds[0]
    assert fold.gamma == pytest.approx(1.0, abs=1e-6)
    phase = model_2d.k_dot_beta * fold.nu * fold.omega - model_2d.theta
    assert 0.5 * model_2d.mu * fold.nu * abs(math.sin(phase)) == pytest.approx(1.0, abs=0.1)

    below, above = fold_bracket(system, fold)
    assert abs(above - below) == 2
    assert fold.nu_second_fit == pytest.approx(fold.nu_second, rel=1e-3)
    assert fold.gamma_slope_fit == pytest.approx(fold.gamma_slope, rel=1e-3)
    assert fold.omega * fold.nu_second / fold.nu == pytest.approx(fold.gamma_slope, rel=1e-6)
    assert any(point.fold_flag for point in branch.points)
    assert fold_root_slope(system, fold) == pytest.approx(fold.gamma_slope, rel=1e-3)


@pytest.mark.slow
def test_classification_changes_only_at_folds_and_flips(system_2d):
    settings = StabilitySettings()
    branch = trace_branch(
        system_2d,
        (0.0, 90.0),
        starting_point(system_2d),
        ContinuationSettings(),
        lambda system, record: classify(system, record, settings),
    )
    changes = branch.stability_changes()
    assert len(branch.folds) >= 2
    for fold in branch.folds:
        assert any(
            kind == "fold" and branch.points[i].tau <= fold.tau <= branch.points[j].tau
            for i, j, kind in changes
        )
    assert sum(kind == "fold" for _, _, kind in changes) == len(branch.folds)
    for i, j, kind in changes:
        if kind == "flip":
            assert (branch.points[i].gamma + 1.0) * (branch.points[j].gamma + 1.0) <= 0.0
