"""Branch tracing for the reduced mean-field equation ω = M(ν,ω).

Continuation runs in the (ν,ω) plane. Away from folds the branch is a
graph over ν and a frozen-slope Newton corrector at fixed ν suffices; inside
the fold band |1-Γ| < fold_band the corrector works on the bordered
pseudo-arclength system. Folds (Γ = 1) are located by root finding along the
arclength and analysed in the chart τ = ν - ω, where ν(τ) has a critical
point with curvature ν″(τ₀) = -ν₀ M_ωω / ω₀.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from errors import ContractionViolated, NoConvergence, NoCrossing, OutsideCertificate, StepCollapse
from meanfield import (
    fixed_point_record,
    fold_curvature,
    mean_field_curvature,
    mean_field_derivatives,
    mean_field_map,
    theta,
)
from model import TWO_PI, leading_order_mean_field

logger = logging.getLogger(__name__)

CONTRACTION_LIMIT = 0.5


@dataclass(frozen=True)
class FSystem:
    """F(x, λ) = 0 together with ∂ₓF and ∂_λF"""

    residual: Callable
    jacobian: Callable
    param_derivative: Optional[Callable] = None


@dataclass(frozen=True, eq=False)
class IFTCertificate:
    delta: float
    delta1: float
    upsilon: float
    contraction: float
    x0: np.ndarray = field(repr=False)
    lam0: float = 0.0
    slope_inverse: np.ndarray = field(default=None, repr=False)
    closed_form_delta: Optional[float] = None
    closed_form_delta1: Optional[float] = None

    def to_dict(self):
        return {
            "delta": self.delta,
            "delta1": self.delta1,
            "upsilon": self.upsilon,
            "contraction": self.contraction,
            "x0": [float(v) for v in np.atleast_1d(self.x0)],
            "lam0": self.lam0,
            "closed_form_delta": self.closed_form_delta,
            "closed_form_delta1": self.closed_form_delta1,
        }


@dataclass(frozen=True)
class CorrectorResult:
    x: np.ndarray
    iterations: int
    contraction: float
    residual: float


def _as_matrix(value):
    return np.atleast_2d(np.asarray(value, dtype=float))


def build_certificate(fsys, x0, lam0, delta, samples=5, max_shrink=30):
    """Measured IFT certificate around a solution (x0, λ0).

    Samples sup‖I - A₀⁻¹∂ₓF‖ and Υ = sup‖A₀⁻¹∂_λF‖ on the box of radius δ in
    (x, λ); δ is halved until the sampled contraction is at most 1/2.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    A0_inv = np.linalg.inv(_as_matrix(fsys.jacobian(x0, lam0)))
    identity = np.eye(len(x0))
    offsets = np.linspace(-1.0, 1.0, samples)

    for _ in range(max_shrink):
        contraction = 0.0
        upsilon = 0.0
        for corner in np.array(np.meshgrid(*([offsets] * (len(x0) + 1)), indexing="ij")).reshape(len(x0) + 1, -1).T:
            x = x0 + delta * corner[:-1]
            lam = lam0 + delta * corner[-1]
            contraction = max(contraction, np.linalg.norm(identity - A0_inv @ _as_matrix(fsys.jacobian(x, lam)), 2))
            if fsys.param_derivative is not None:
                upsilon = max(upsilon, float(np.linalg.norm(A0_inv @ np.atleast_1d(fsys.param_derivative(x, lam)))))
        if contraction <= CONTRACTION_LIMIT:
            delta1 = delta / (2.0 * upsilon) if upsilon > 0 else math.inf
            return IFTCertificate(delta, delta1, upsilon, contraction, x0, float(lam0), A0_inv)
        delta *= 0.5
    raise ContractionViolated(
        f"no radius gives contraction <= 1/2 around lambda={lam0:g}", factor=contraction, delta=delta
    )


def newton_corrector(fsys, x0, lam, cert=None, slope=None, tol=1e-12, max_iter=100):
    """Frozen-slope Newton x ← x - A₀⁻¹F(x,λ), recording the empirical contraction"""
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if cert is not None:
        if abs(lam - cert.lam0) > cert.delta1:
            raise OutsideCertificate(
                f"parameter {lam:g} is outside the certified radius {cert.delta1:g} around {cert.lam0:g}",
                lam=lam,
                lam0=cert.lam0,
                delta1=cert.delta1,
            )
        A0_inv = cert.slope_inverse
    else:
        A0_inv = np.linalg.inv(_as_matrix(slope if slope is not None else fsys.jacobian(x, lam)))

    steps = []
    contraction = 0.0
    residual = np.atleast_1d(fsys.residual(x, lam))
    for iteration in range(1, max_iter + 1):
        norm = float(np.linalg.norm(residual))
        if norm <= tol:
            return CorrectorResult(x, iteration - 1, contraction, norm)
        update = A0_inv @ residual
        x = x - update
        steps.append(float(np.linalg.norm(update)))
        floor = 1e3 * np.finfo(float).eps * max(1.0, float(np.linalg.norm(x)))
        if len(steps) >= 2 and steps[-2] > floor and steps[-1] > floor:
            contraction = max(contraction, steps[-1] / steps[-2])
            if contraction > CONTRACTION_LIMIT:
                raise ContractionViolated(
                    f"measured contraction {contraction:.3f} exceeds 1/2", factor=contraction, lam=lam
                )
        residual = np.atleast_1d(fsys.residual(x, lam))
        if len(steps) >= 2 and steps[-1] <= floor:
            norm = float(np.linalg.norm(residual))
            return CorrectorResult(x, iteration, contraction, norm)
    raise NoConvergence(
        f"frozen-slope Newton did not converge in {max_iter} iterations",
        residual=float(np.linalg.norm(residual)),
        lam=lam,
    )


def scalar_system(system, nu):
    """Reduced equation at fixed ν: x = (ω,), λ = ν"""

    def residual(x, lam):
        return np.array([x[0] - mean_field_map(system, lam, x[0])])

    def jacobian(x, lam):
        _, _, slope = mean_field_derivatives(system, lam, x[0])
        return np.array([[1.0 - slope]])

    def param_derivative(x, lam):
        _, m_nu, _ = mean_field_derivatives(system, lam, x[0])
        return np.array([-m_nu])

    return FSystem(residual, jacobian, param_derivative)


def arclength_system(system, base, tangent):
    """Bordered system: x = (ν,ω), λ = s, second row t·(x - base) - s"""

    def residual(x, lam):
        return np.array([x[1] - mean_field_map(system, x[0], x[1]), tangent @ (x - base) - lam])

    def jacobian(x, lam):
        _, m_nu, m_omega = mean_field_derivatives(system, x[0], x[1])
        return np.array([[-m_nu, 1.0 - m_omega], tangent])

    def param_derivative(x, lam):
        return np.array([0.0, -1.0])

    return FSystem(residual, jacobian, param_derivative)


def noturn_radii(system, nu, omega):
    """δ and δ₁ from the closed-form no-turning bound, with C̄ measured at (ν,ω)"""
    response_norm = theta(system, float(nu), float(omega)).norm()
    alpha_norm = math.sqrt(1.5 * TWO_PI**system.model.dim)
    c_bar = max(1.0, 1.0 + nu * response_norm * alpha_norm, omega * response_norm)
    _, _, fold = mean_field_derivatives(system, nu, omega)
    gap = abs(1.0 - fold)
    if gap == 0.0:
        return 0.0, 0.0
    factor = 1.0 / gap + 1.0
    return 1.0 / (4.0 * c_bar**2 * factor**2), 1.0 / (8.0 * c_bar**3 * factor**3)


def certify_point(system, nu, omega, delta=1e-2, samples=3):
    """IFT certificate of the reduced equation at a regular branch point"""
    cert = build_certificate(scalar_system(system, nu), [omega], nu, delta, samples=samples)
    closed_form_delta, closed_form_delta1 = noturn_radii(system, nu, omega)
    return replace(cert, closed_form_delta=closed_form_delta, closed_form_delta1=closed_form_delta1)


@dataclass(frozen=True)
class ContinuationSettings:
    initial_step: float = 0.05
    max_step: float = 0.5
    min_step: float = 1e-8
    fold_band: float = 0.2
    fold_tol: float = 1e-8
    corrector_tol: float = 1e-12
    corrector_max_iter: int = 30
    fit_scale: float = 0.01
    fit_points: int = 7
    max_points: int = 200_000


@dataclass
class BranchPoint:
    tau: float
    nu: float
    omega: float
    gamma: float
    xi1: complex
    residual: float
    contraction: float = 0.0
    chart: str = "natural"
    fold_flag: bool = False
    leading_eig: Optional[complex] = None
    stability: Optional[str] = None

    def to_row(self):
        eig = self.leading_eig if self.leading_eig is not None else complex("nan")
        return {
            "tau": self.tau,
            "nu": self.nu,
            "omega": self.omega,
            "gamma": self.gamma,
            "xi1_re": self.xi1.real,
            "xi1_im": self.xi1.imag,
            "leading_eig_re": eig.real,
            "leading_eig_im": eig.imag,
            "fold_flag": int(self.fold_flag),
            "stability": self.stability or "",
            "residual": self.residual,
            "contraction": self.contraction,
            "chart": self.chart,
        }


@dataclass(frozen=True)
class FoldRecord:
    tau: float
    nu: float
    omega: float
    gamma: float
    nu_second: float
    nu_second_fit: float
    nu_first_fit: float
    fit_window: float
    gamma_slope: float
    gamma_slope_fit: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Branch:
    points: list
    folds: list
    provenance: dict
    unmatched_roots: list = field(default_factory=list)

    def to_frame(self):
        return pd.DataFrame([point.to_row() for point in self.points])

    def omegas_at(self, nu):
        """Linear estimates of the branch crossings of a vertical line ν = const"""
        crossings = []
        for left, right in zip(self.points, self.points[1:]):
            if (left.nu - nu) * (right.nu - nu) <= 0 and left.nu != right.nu:
                weight = (nu - left.nu) / (right.nu - left.nu)
                crossings.append(left.omega + weight * (right.omega - left.omega))
        return sorted(crossings)

    def stability_changes(self):
        """Indices where the classification changes, tagged 'fold' or 'flip'"""
        changes = []
        labelled = [(i, p) for i, p in enumerate(self.points) if p.stability and not p.fold_flag]
        for (i, left), (j, right) in zip(labelled, labelled[1:]):
            if left.stability == right.stability:
                continue
            between = self.points[i:j + 1]
            kind = "fold" if any(p.fold_flag for p in between) else "flip"
            changes.append((i, j, kind))
        return changes

    def summary(self, counts=None):
        return {
            "points": len(self.points),
            "folds": [fold.to_dict() for fold in self.folds],
            "solution_counts": counts or {},
            "unmatched_roots": self.unmatched_roots,
            "stability_changes": [
                {"from": i, "to": j, "kind": kind} for i, j, kind in self.stability_changes()
            ],
            "provenance": self.provenance,
        }


def _tangent(m_nu, m_omega, previous=None):
    tangent = np.array([1.0 - m_omega, m_nu])
    tangent /= np.linalg.norm(tangent)
    if previous is None:
        return tangent if tangent[0] >= 0 else -tangent
    return tangent if tangent @ previous >= 0 else -tangent


def _make_point(system, x, tau, contraction, chart, classifier):
    record = fixed_point_record(system, x[0], x[1])
    point = BranchPoint(
        tau=tau,
        nu=record.nu,
        omega=record.omega,
        gamma=record.gamma,
        xi1=record.xi1,
        residual=record.residual,
        contraction=contraction,
        chart=chart,
    )
    report = classifier(system, record) if classifier is not None else None
    if report is not None:
        point.leading_eig = report.leading_eig
        point.stability = report.classification
    return point


def _correct(system, x, tangent, step, slope, settings, in_band):
    """One predictor-corrector step from the accepted point x"""
    predicted = x + step * tangent
    if in_band:
        fsys = arclength_system(system, x, tangent)
        A0 = np.array([[-slope[0], 1.0 - slope[1]], tangent])
        result = newton_corrector(fsys, predicted, step, slope=A0, tol=settings.corrector_tol,
                                  max_iter=settings.corrector_max_iter)
        return result.x, result, "arclength"
    fsys = scalar_system(system, predicted[0])
    result = newton_corrector(fsys, [predicted[1]], predicted[0], slope=[[1.0 - slope[1]]],
                              tol=settings.corrector_tol, max_iter=settings.corrector_max_iter)
    return np.array([predicted[0], result.x[0]]), result, "natural"


def trace_branch(system, nu_range, start, settings=None, classifier=None):
    """Follow the solution curve from `start` until ν leaves nu_range"""
    settings = settings or ContinuationSettings()
    nu_lo, nu_hi = nu_range
    x = np.array([start.nu, start.omega])
    _, m_nu, m_omega = mean_field_derivatives(system, *x)
    tangent = _tangent(m_nu, m_omega)
    tau = 0.0
    points = [_make_point(system, x, tau, 0.0, "natural", classifier)]
    folds = []
    step = settings.initial_step
    halvings = 0

    while len(points) < settings.max_points:
        in_band = abs(1.0 - m_omega) < settings.fold_band
        limit = settings.max_step * (0.5 if in_band else 1.0)
        step = min(step, limit)
        try:
            x_new, result, chart = _correct(system, x, tangent, step, (m_nu, m_omega), settings, in_band)
        except (ContractionViolated, NoConvergence) as e:
            step *= 0.5
            halvings += 1
            if step < settings.min_step:
                raise StepCollapse(
                    f"step collapsed below {settings.min_step:g} at nu={x[0]:.10g}, omega={x[1]:.10g}",
                    nu=float(x[0]),
                    omega=float(x[1]),
                ) from e
            continue

        if not nu_lo <= x_new[0] <= nu_hi:
            boundary = nu_hi if x_new[0] > nu_hi else nu_lo
            if abs(boundary - x[0]) > 1e-12 and not in_band:
                end = newton_corrector(
                    scalar_system(system, boundary), [x[1]], boundary, slope=[[1.0 - m_omega]],
                    tol=settings.corrector_tol, max_iter=settings.corrector_max_iter,
                )
                x_end = np.array([boundary, end.x[0]])
                tau += float(np.linalg.norm(x_end - x))
                points.append(_make_point(system, x_end, tau, end.contraction, "natural", classifier))
            break

        _, m_nu_new, m_omega_new = mean_field_derivatives(system, *x_new)
        tangent_new = _tangent(m_nu_new, m_omega_new, tangent)
        if (1.0 - m_omega) * (1.0 - m_omega_new) < 0:
            fold, fold_x, fold_s = detect_fold(system, x, tangent, x_new, settings, tau)
            folds.append(fold)
            fold_point = _make_point(system, fold_x, tau + fold_s, 0.0, "arclength", None)
            fold_point.fold_flag = True
            fold_point.stability = "marginal" if classifier is not None else None
            points.append(fold_point)
            logger.info(f"Fold at nu={fold.nu:.10g}, omega={fold.omega:.10g}, nu''={fold.nu_second:.6g}")

        tau += float(np.linalg.norm(x_new - x))
        points.append(_make_point(system, x_new, tau, result.contraction, chart, classifier))
        x, tangent, m_nu, m_omega = x_new, tangent_new, m_nu_new, m_omega_new
        if result.iterations <= 4:
            step *= 1.5

    logger.info(f"Traced {len(points)} points and {len(folds)} folds ({halvings} step halvings)")
    provenance = {
        "model": system.model.to_dict(),
        "K": system.basis.K,
        "oversample": system.basis.oversample,
        "nu_range": [nu_lo, nu_hi],
        "settings": settings.__dict__,
    }
    return Branch(points, folds, provenance)


def _arclength_point(system, base, tangent, s, settings):
    """Branch point at arclength parameter s from base along tangent"""
    _, m_nu, m_omega = mean_field_derivatives(system, *base)
    A0 = np.array([[-m_nu, 1.0 - m_omega], tangent])
    fsys = arclength_system(system, base, tangent)
    return newton_corrector(fsys, base + s * tangent, s, slope=A0, tol=settings.corrector_tol,
                            max_iter=4 * settings.corrector_max_iter).x


def _lambda_chart_omega(system, tau, omega0, max_iter=40):
    """Solve ω = M(τ + ω, ω) by Newton; ν = τ + ω"""
    omega = omega0
    for _ in range(max_iter):
        value, m_nu, m_omega = mean_field_derivatives(system, tau + omega, omega)
        update = (omega - value) / (1.0 - m_nu - m_omega)
        omega -= update
        if abs(update) <= 4.0 * np.finfo(float).eps * abs(omega):
            break
    return omega


def detect_fold(system, base, tangent, end, settings=None, tau_base=0.0):
    """Locate Γ = 1 between two accepted points and analyse the fold in the chart τ = ν - ω"""
    settings = settings or ContinuationSettings()
    span = float(tangent @ (end - base))

    def fold_gap(s):
        x = _arclength_point(system, base, tangent, s, settings)
        return 1.0 - mean_field_derivatives(system, *x)[2]

    lo_gap, hi_gap = fold_gap(0.0), fold_gap(span)
    if lo_gap * hi_gap > 0:
        raise NoCrossing(f"Γ - 1 keeps its sign between nu={base[0]:.8g} and nu={end[0]:.8g}")
    s_fold = brentq(fold_gap, 0.0, span, xtol=1e-15, rtol=4.0 * np.finfo(float).eps)
    x_fold = _arclength_point(system, base, tangent, s_fold, settings)
    nu0, omega0 = float(x_fold[0]), float(x_fold[1])
    _, _, fold_gamma = mean_field_derivatives(system, nu0, omega0)
    if abs(fold_gamma - 1.0) > settings.fold_tol:
        logger.warning(f"Fold located only to |Γ-1| = {abs(fold_gamma - 1.0):.2e}")

    tau0 = nu0 - omega0
    delta = settings.fit_scale / max(nu0, 1.0)
    half = settings.fit_points // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    omegas = np.array([_lambda_chart_omega(system, tau0 + delta * u, omega0) for u in offsets])
    nus = tau0 + delta * offsets + omegas
    coeffs = np.polynomial.polynomial.polyfit(offsets, nus, 3)
    gammas = np.array([mean_field_derivatives(system, n, w)[2] for n, w in zip(nus, omegas)])
    slope_fit = np.polynomial.polynomial.polyfit(offsets, gammas, 2)[1] / delta

    record = FoldRecord(
        tau=tau_base + s_fold,
        nu=nu0,
        omega=omega0,
        gamma=fold_gamma,
        nu_second=float(fold_curvature(system, nu0, omega0)),
        nu_second_fit=float(2.0 * coeffs[2] / delta**2),
        nu_first_fit=float(coeffs[1] / delta),
        fit_window=float(half * delta),
        gamma_slope=float(-mean_field_curvature(system, nu0, omega0)),
        gamma_slope_fit=float(slope_fit),
    )
    return record, x_fold, s_fold


def _scan_roots(function, lo, hi, points, tol):
    grid = np.linspace(lo, hi, points)
    values = np.array([function(w) for w in grid])
    roots = [float(grid[i]) for i in np.flatnonzero(values == 0.0)]
    for i in np.flatnonzero(values[:-1] * values[1:] < 0):
        roots.append(brentq(function, grid[i], grid[i + 1], xtol=0.01 * tol, rtol=4.0 * np.finfo(float).eps))
    return sorted(roots)


def solve_scalar_all(system, nu, points=4096, tol=1e-10):
    """Every root of ω - M(ν,ω) by a dense sign-change scan plus bracketing"""
    model = system.model
    if model.mu == 0.0:
        return [mean_field_map(system, nu, 1.0)]
    width = model.mu * model.k_norm
    for _ in range(4):
        lo, hi = 1.0 - width, 1.0 + width
        edges = [mean_field_map(system, nu, w) for w in (lo, hi)]
        if lo < min(edges) and max(edges) < hi:
            break
        width *= 2.0
    return _scan_roots(lambda w: w - mean_field_map(system, nu, w), lo, hi, points, tol)


def leading_order_roots(model, nu, points=16384, tol=1e-12):
    """Roots of the closed-form law ω = M₀(ν,ω)"""
    if model.mu == 0.0:
        return [1.0]
    width = model.mu * model.k_norm
    return _scan_roots(
        lambda w: w - float(leading_order_mean_field(model, nu, w)[0]), 1.0 - width, 1.0 + width, points, tol
    )


def count_solutions(system, nu, points=4096):
    return len(solve_scalar_all(system, nu, points))


def match_branch_roots(system, branch, nu, roots, tol=1e-8):
    """Refine the branch crossings at ν and pair them with independently found roots"""
    refined = []
    for guess in branch.omegas_at(nu):
        try:
            result = newton_corrector(scalar_system(system, nu), [guess], nu, tol=1e-13, max_iter=60)
            refined.append(float(result.x[0]))
        except (ContractionViolated, NoConvergence):
            refined.append(guess)
    unmatched = [root for root in roots if not any(abs(root - w) <= tol for w in refined)]
    if unmatched:
        logger.warning(f"{len(unmatched)} root(s) at nu={nu:g} are not on the traced branch")
    return refined, unmatched


def starting_point(system, nu0=0.0):
    """Fixed point at the left end of the range (unique for small ν)"""
    from meanfield import solve_fixed_point

    return solve_fixed_point(system, nu0, mean_field_map(system, nu0, 1.0))


def local_root_count(system, nu, center, half_width, points=2001):
    """Sign changes of ω - M(ν,ω) on a fine grid around `center`"""
    grid = np.linspace(center - half_width, center + half_width, points)
    values = np.array([w - mean_field_map(system, nu, w) for w in grid])
    return int(np.count_nonzero(values[:-1] * values[1:] < 0) + np.count_nonzero(values == 0.0))


def fold_bracket(system, fold, dnu=1e-6, points=2001):
    """Root counts just below and just above a fold, near its ω"""
    spread = 2.0 * math.sqrt(2.0 * dnu / max(abs(fold.nu_second), 1e-12))
    half_width = max(1e-4, 2.0 * spread)
    points = min(max(points, int(2.0 * half_width / 5e-8) + 1), 100_001)
    below = local_root_count(system, fold.nu - dnu, fold.omega, half_width, points)
    above = local_root_count(system, fold.nu + dnu, fold.omega, half_width, points)
    return below, above
