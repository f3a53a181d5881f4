"""Cross-oracle invariant suites behind `main.py validate`.

Every check compares a measured margin against a threshold and is recorded
as a CheckResult; the command fails when any check fails.
"""
import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import pandas as pd

from continuation import (
    FSystem,
    build_certificate,
    fold_bracket,
    newton_corrector,
    starting_point,
    trace_branch,
    ContinuationSettings,
)
from errors import OutsideCertificate
from meanfield import (
    build_system,
    dF_dh,
    frozen_srb,
    gamma,
    inverse_dF_dh,
    mean_field_curvature,
    mean_field_map,
    residual_F,
    solve_fixed_point,
    theta,
    verify_fixed_point,
    xi,
)
from model import (
    apply_coupled_map,
    build_model,
    coefficients_ab,
    invert_rho,
    leading_order_mean_field,
    rho,
    rho_jacobian,
    to_torus,
    torus_distance,
    uncoupled_srb_values,
)
from particle import init_ensemble, mean_field, step
from stability import dense_secular_check, eigvec_at_one, eigvec_residual, fold_root_slope, linearize
from transfer import Density, alpha_integral, dense_matrix

logger = logging.getLogger(__name__)

SUITES = ("model", "transfer", "meanfield", "continuation", "stability", "particle")


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    measured: float
    threshold: float
    passed: bool

    def to_row(self):
        return dict(self.__dict__)


def check(suite, name, measured, threshold):
    measured = float(measured)
    passed = bool(np.isfinite(measured) and measured <= threshold)
    if not passed:
        logger.warning(f"[{suite}] {name}: {measured:.3e} > {threshold:.3e}")
    return CheckResult(suite, name, measured, float(threshold), passed)


class ValidationContext:
    """Models and systems shared by the suites, built on first use"""

    def __init__(self, config):
        self.config = config
        self.settings = config.section("validate")
        self.seed = config.seed
        self.solver = config.section("solver")

    @cached_property
    def model(self):
        return build_model(self.config.model)

    @cached_property
    def model_1d(self):
        return build_model({"dim": 1})

    @cached_property
    def system(self):
        K = self.settings["K_2d"] if self.model.dim == 2 else self.settings["K_1d"]
        return build_system(self.model, K, **self.solver)

    @cached_property
    def system_1d(self):
        return build_system(self.model_1d, self.settings["K_1d"], **self.solver)

    @cached_property
    def fixed_point_1d(self):
        return solve_fixed_point(self.system_1d, 3.0, 1.0)


def _relative(a, b):
    scale = max(abs(b), 1e-300)
    return abs(a - b) / scale


def model_suite(ctx):
    results = []
    rng = np.random.default_rng(ctx.seed)
    for label, model in (("configured", ctx.model), ("1d", ctx.model_1d)):
        y = rng.uniform(0.0, 2.0 * np.pi, size=(512, model.dim))
        x = invert_rho(model, y)
        results.append(check("model", f"rho_round_trip_{label}", np.max(torus_distance(to_torus(rho(model, x)), y)), 1e-12))

        small = replace(model, mu=1e-2)
        x = invert_rho(small, y, wrap=False)
        a, b = coefficients_ab(small, y)
        expansion = 1.0 + small.mu * a + small.mu**2 * b
        error = np.max(np.abs(1.0 / rho_jacobian(small, x) - expansion))
        results.append(check("model", f"jacobian_expansion_{label}", error, 20.0 * (small.mu * small.k_norm) ** 3))

    basis_system = ctx.system
    constant = Density.constant(basis_system.basis)
    results.append(check("model", "alpha_mean_one", abs(alpha_integral(ctx.model, constant) - 1.0), 1e-14))
    return results


def transfer_suite(ctx):
    results = []
    system = ctx.system_1d
    model = system.model
    op = system.transfer(1.0, 1.0)
    rng = np.random.default_rng(ctx.seed)

    coeffs = rng.standard_normal(system.basis.size) + 1j * rng.standard_normal(system.basis.size)
    image = op.apply_coeffs(coeffs)
    results.append(check("transfer", "mass_preserved", abs(image[system.basis.zero_index] - coeffs[system.basis.zero_index]), 1e-14))
    dense = dense_matrix(op)
    results.append(check("transfer", "dense_matches_matrix_free", np.linalg.norm(dense @ coeffs - image) / np.linalg.norm(coeffs), 1e-12))

    for label, sys_ in (("1d", system), ("configured", ctx.system)):
        h = frozen_srb(sys_, 0.0, 0.0)
        points = sys_.basis.collocation_points()
        exact = uncoupled_srb_values(sys_.model, points).reshape(h.grid_view().shape)
        results.append(check("transfer", f"srb_matches_closed_form_{label}", np.max(np.abs(h.grid_view() - exact)), 1e-9))

    # ∫ e^{-ix} 𝓛h = ∫ e^{-iT(x)} h
    h = frozen_srb(system, 1.0, 1.0)
    grid = 2.0 * np.pi * np.arange(4096) / 4096
    values = h.values(4096).real
    pushed = apply_coupled_map(model, 1.0, 1.0, grid[:, None])[:, 0]
    direct = np.mean(np.exp(-1j * pushed) * values) * 2.0 * np.pi
    image = op.apply(h)
    galerkin = image.coeff((1,)) * 2.0 * np.pi
    results.append(check("transfer", "adjoint_identity", abs(direct - galerkin), 1e-10))

    finer = build_system(model, system.basis.K + 16, **ctx.solver)
    coarse_h, fine_h = frozen_srb(system, 1.0, 1.0), frozen_srb(finer, 1.0, 1.0)
    common = [fine_h.coeff((k,)) - coarse_h.coeff((k,)) for k in range(-system.basis.K, system.basis.K + 1)]
    results.append(check("transfer", "cutoff_cauchy", np.max(np.abs(common)), 1e-10))
    return results


def meanfield_suite(ctx):
    results = []
    system = ctx.system_1d
    step_ = ctx.settings["fd_step"]
    nu, omega = 3.0, 1.02

    fd = (mean_field_map(system, nu, omega + step_) - mean_field_map(system, nu, omega - step_)) / (2 * step_)
    results.append(check("meanfield", "gamma_vs_dM_domega", abs(gamma(system, nu, omega) - fd), 1e-6))

    response = theta(system, nu, omega)
    dH_dnu = (frozen_srb(system, nu + step_, omega) - frozen_srb(system, nu - step_, omega)) / (2 * step_)
    results.append(check("meanfield", "dH_dnu_vs_omega_theta", (dH_dnu - omega * response).norm() / (omega * response).norm(), 1e-4))
    dH_domega = (frozen_srb(system, nu, omega + step_) - frozen_srb(system, nu, omega - step_)) / (2 * step_)
    results.append(check("meanfield", "dH_domega_vs_nu_theta", (dH_domega - nu * response).norm() / (nu * response).norm(), 1e-4))

    curvature_fd = (gamma(system, nu, omega + step_) - gamma(system, nu, omega - step_)) / (2 * step_)
    results.append(check("meanfield", "M_omega_omega", _relative(mean_field_curvature(system, nu, omega), curvature_fd), 1e-4))

    h = frozen_srb(system, nu, omega)
    rng = np.random.default_rng(ctx.seed)
    values = rng.standard_normal(system.basis.n_grid)
    phi = Density.from_grid(system.basis, values).mean_zero()
    phi = phi + Density.mode(system.basis, system.model.k, 0.3) + Density.mode(system.basis, tuple(-v for v in system.model.k), 0.3)
    fd = (residual_F(system, nu, h + step_ * phi) - residual_F(system, nu, h - step_ * phi)) / (2 * step_)
    formula = dF_dh(system, nu, h, phi)
    results.append(check("meanfield", "D_hF_vs_difference", (fd - formula).norm() / formula.norm(), 1e-4))
    roundtrip = dF_dh(system, nu, h, inverse_dF_dh(system, nu, h, phi))
    results.append(check("meanfield", "inverse_D_hF", (roundtrip - phi).norm() / phi.norm(), 1e-10))

    record = ctx.fixed_point_1d
    results.append(check("meanfield", "xi1_equals_gamma", abs(xi(system, record, 1.0) - record.gamma), 1e-8))
    ok, margins = verify_fixed_point(system, record)
    results.append(check("meanfield", "fixed_point_equivalence", max(margins.values()), 1e-8))

    model = ctx.model
    if model.dim == 2:
        worst = 0.0
        for nu_ in np.linspace(0.0, 25.0, 6):
            for omega_ in np.linspace(0.96, 1.04, 5):
                m0, _ = leading_order_mean_field(model, nu_, omega_)
                worst = max(worst, abs(mean_field_map(ctx.system, nu_, omega_) - m0))
        results.append(check("meanfield", "leading_order_law", worst, model.mu**2))
    return results


def continuation_suite(ctx):
    results = []
    linear = FSystem(lambda x, lam: x - lam, lambda x, lam: np.eye(1), lambda x, lam: -np.ones(1))
    cert = build_certificate(linear, [1.0], 1.0, 0.2)
    run = newton_corrector(linear, [1.0], 1.05, cert)
    results.append(check("continuation", "linear_one_step", abs(run.iterations - 1), 0))
    results.append(check("continuation", "linear_upsilon", abs(cert.upsilon - 1.0), 1e-15))

    quadratic = FSystem(lambda x, lam: x**2 - lam, lambda x, lam: np.diag(2.0 * x), lambda x, lam: -np.ones(1))
    cert = build_certificate(quadratic, [1.0], 1.0, 0.2)
    results.append(check("continuation", "quadratic_delta1", abs(cert.delta1 - 0.2), 1e-12))
    worst, contraction = 0.0, 0.0
    for lam in np.linspace(1.0 - cert.delta1, 1.0 + cert.delta1, 9):
        run = newton_corrector(quadratic, [1.0], lam, cert, tol=1e-14)
        worst = max(worst, abs(run.x[0] - math.sqrt(lam)))
        contraction = max(contraction, run.contraction)
    results.append(check("continuation", "quadratic_root", worst, 1e-12))
    results.append(check("continuation", "quadratic_contraction", contraction, 0.5))
    try:
        newton_corrector(quadratic, [1.0], 1.0 + 2.0 * cert.delta1, cert)
        outside = 1.0
    except OutsideCertificate:
        outside = 0.0
    results.append(check("continuation", "outside_certificate_rejected", outside, 0.0))

    system = ctx.system
    model = system.model
    settings = ContinuationSettings()
    branch = trace_branch(system, (0.0, ctx.settings["fold_nu_max"]), starting_point(system), settings)
    results.append(check("continuation", "folds_found", 0.0 if branch.folds else 1.0, 0.0))
    for i, fold in enumerate(branch.folds):
        results.append(check("continuation", f"fold{i}_gamma", abs(fold.gamma - 1.0), 1e-6))
        if i == 0:
            phase = model.k_dot_beta * fold.nu * fold.omega - model.theta
            amplitude = 0.5 * model.mu * model.k_norm * model.k_dot_beta * fold.nu * abs(math.sin(phase))
            results.append(check("continuation", "first_fold_leading_order", abs(amplitude - 1.0), 0.1))
        below, above = fold_bracket(system, fold)
        results.append(check("continuation", f"fold{i}_bracket", abs(abs(above - below) - 2), 0))
        results.append(check("continuation", f"fold{i}_curvature_fit", _relative(fold.nu_second_fit, fold.nu_second), 1e-3))
        results.append(check("continuation", f"fold{i}_first_derivative", abs(fold.nu_first_fit), max(1e-6, 1e-3 * abs(fold.nu_second) * fold.fit_window)))
        results.append(check("continuation", f"fold{i}_gamma_slope", _relative(fold.gamma_slope_fit, fold.gamma_slope), 1e-3))
        identity = fold.omega * fold.nu_second / fold.nu
        results.append(check("continuation", f"fold{i}_slope_identity", _relative(identity, fold.gamma_slope), 1e-6))
        if i == 0:
            results.append(check("continuation", "first_fold_root_slope", _relative(fold_root_slope(system, fold), fold.gamma_slope), 1e-3))
    return results


def stability_suite(ctx):
    from meanfield import fixed_point_record

    results = []
    system = ctx.system_1d
    rng = np.random.default_rng(ctx.seed)
    worst, unmatched = 0.0, 0
    for _ in range(ctx.settings["draws"]):
        nu, omega = rng.uniform(2.0, 8.0), rng.uniform(0.8, 1.2)
        outcome = dense_secular_check(system, fixed_point_record(system, nu, omega))
        worst = max(worst, outcome["max_distance"])
        unmatched += len(outcome["unmatched_dense"]) + len(outcome["unmatched_secular"])
    results.append(check("stability", "secular_vs_dense_distance", worst, 1e-8))
    results.append(check("stability", "secular_vs_dense_unmatched", unmatched, 0))

    record = ctx.fixed_point_1d
    lin = linearize(system, record)
    rng_phi = rng.standard_normal(system.basis.size) + 1j * rng.standard_normal(system.basis.size)
    phi = Density(system.basis, rng_phi)
    results.append(check("stability", "derivative_preserves_mass", abs(lin.apply(phi).mass - phi.mass), 1e-12))
    if abs(record.xi1 - 1.0) >= 0.05:
        results.append(check("stability", "eigvec_at_one", eigvec_residual(lin, eigvec_at_one(system, record)), 1e-8))
    return results


def particle_suite(ctx):
    results = []
    model = ctx.model
    density = Density.constant(ctx.system.basis)
    N = ctx.settings["particles"]
    first = init_ensemble(density, N, ctx.seed)
    second = init_ensemble(density, N, ctx.seed)
    chunked = init_ensemble(density, N, ctx.seed, chunk=7)
    results.append(check("particle", "seed_determinism", 0.0 if np.array_equal(first.positions, second.positions) else 1.0, 0.0))
    results.append(check("particle", "chunk_independence", 0.0 if np.array_equal(first.positions, chunked.positions) else 1.0, 0.0))

    order = np.random.default_rng(ctx.seed + 1).permutation(N)
    nu = 5.0
    lhs = step(first.permuted(order), model, nu).positions
    rhs = step(first, model, nu).positions[order]
    results.append(check("particle", "permutation_equivariance", 0.0 if np.array_equal(lhs, rhs) else 1.0, 0.0))

    half = N // 2
    whole = first
    left = first.permuted(np.arange(half))
    right = first.permuted(np.arange(half, N))
    for _ in range(20):
        whole, left, right = step(whole, model, 0.0), step(left, model, 0.0), step(right, model, 0.0)
    joined = np.concatenate([left.positions, right.positions])
    results.append(check("particle", "decoupled_partition", 0.0 if np.array_equal(whole.positions, joined) else 1.0, 0.0))
    omega = mean_field(whole.positions, model)
    results.append(check("particle", "mean_field_range", 0.0 if 0.0 <= omega <= 2.0 else 1.0, 0.0))
    return results


SUITE_FUNCTIONS = {
    "model": model_suite,
    "transfer": transfer_suite,
    "meanfield": meanfield_suite,
    "continuation": continuation_suite,
    "stability": stability_suite,
    "particle": particle_suite,
}


def run_suites(config, names=None):
    ctx = ValidationContext(config)
    results = []
    for name in names or config.section("validate")["suites"]:
        logger.info(f"Running {name} suite")
        results.extend(SUITE_FUNCTIONS[name](ctx))
    failed = sum(not r.passed for r in results)
    logger.info(f"{len(results)} checks, {failed} failed")
    return results


def results_frame(results):
    return pd.DataFrame([r.to_row() for r in results], columns=["suite", "name", "measured", "threshold", "passed"])
