"""Linear stability of mean-field fixed points.

The derivative of h ↦ 𝓛_{T_{ν,∫αh}} h at a fixed point is the rank-one
perturbation

    𝒟_h φ = 𝓛φ - v ∫αφ,    v = ν div(𝓛βh),

so z ∉ σ(𝓛) is an eigenvalue of 𝒟_h exactly when the secular equation
Ξ(z) = -∫α (z - 𝓛)⁻¹v = 1 holds. Roots are counted with the argument
principle on an annulus that excludes σ(𝓛) and then polished by Newton.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator

from errors import ContourTooClose, MarginalUndecidable, NoConvergence
from model import TWO_PI
from transfer import (
    Density,
    KrylovResolvent,
    alpha_integral,
    alpha_row,
    dense_matrix,
    divergence_coupling,
    resolvent_solve,
    spectral_gap_estimate,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StabilitySettings:
    circle_points: int = 256
    quadrature_points: int = 256
    max_quadrature_points: int = 4096
    inner_radius: float = 0.5
    tol: float = 1e-6
    contour_margin: float = 1e-6
    contour_retries: int = 3
    krylov_dim: int = 400
    polish_tol: float = 1e-12
    polish_max_iter: int = 50
    workers: int = 1


@dataclass(frozen=True, eq=False)
class LinearizedOperator:
    """𝒟_h = 𝓛 - v ⊗ ∫α, matrix-free"""

    op: object
    rank_one: Density = field(repr=False)
    row: np.ndarray = field(repr=False)

    @property
    def basis(self):
        return self.op.basis

    def apply(self, phi):
        return self.op.apply(phi) - self.rank_one * alpha_integral(self.op.model, phi)

    def apply_coeffs(self, coeffs):
        return self.op.apply_coeffs(coeffs) - self.rank_one.coeffs * (self.row @ coeffs)

    def as_linear_operator(self):
        n = self.basis.size
        return LinearOperator((n, n), matvec=lambda x: self.apply_coeffs(np.ravel(x)), dtype=complex)

    def dense(self, limit=4096):
        return dense_matrix(self.op, limit) - np.outer(self.rank_one.coeffs, self.row)

    def rank_one_norm(self):
        return float(np.linalg.norm(self.rank_one.coeffs) * np.linalg.norm(self.row))


def linearize(system, fixed_point):
    op = system.transfer(fixed_point.nu, fixed_point.omega)
    v = fixed_point.nu * divergence_coupling(op, fixed_point.density)
    return LinearizedOperator(op, v, alpha_row(system.model, system.basis))


class SecularFunction:
    """Ξ(z) and ∂_zΞ(z) for one fixed point

    Contour samples go through the Arnoldi reduction of 𝓛 on the Krylov
    space of v when that space is invariant; `exact` always uses full
    resolvent solves.
    """

    def __init__(self, system, linearized, krylov_dim=400):
        self.system = system
        self.lin = linearized
        self.tol = system.resolvent_tol
        self.trivial = not np.any(linearized.rank_one.coeffs)
        self.krylov = None
        if not self.trivial:
            size = linearized.basis.size - 1
            self.krylov = KrylovResolvent(linearized.op, linearized.rank_one, max_dim=min(krylov_dim, size))
            if not self.krylov.invariant:
                logger.debug(f"Krylov space not invariant at dim {self.krylov.dim}; using resolvent solves")

    def exact(self, z, derivative=False):
        if self.trivial:
            return 0.0j
        op, v = self.lin.op, self.lin.rank_one
        solved = resolvent_solve(op, z, v, tol=self.tol)
        if derivative:
            return alpha_integral(op.model, resolvent_solve(op, z, solved, tol=self.tol))
        return -alpha_integral(op.model, solved)

    def __call__(self, z, derivative=False):
        if self.trivial:
            return 0.0j
        if self.krylov is not None and self.krylov.invariant:
            value = self.krylov.functional(self.lin.row, z, 2 if derivative else 1)
            return value if derivative else -value
        return self.exact(z, derivative)

    def sample(self, points, derivative=False, workers=1):
        if workers > 1 and (self.krylov is None or not self.krylov.invariant):
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return np.array(list(pool.map(lambda z: self(z, derivative), points)))
        return np.array([self(z, derivative) for z in points])

    def response_at_one(self):
        """Θ(1) = -ν(1 - 𝓛)⁻¹div(𝓛βh), so that Ξ(1) = ∫αΘ(1)"""
        if self.trivial:
            return Density.zeros(self.lin.basis)
        return -resolvent_solve(self.lin.op, 1.0, self.lin.rank_one, tol=self.tol)


@dataclass(frozen=True)
class SecularRoot:
    z: complex
    residual: float

    @property
    def kind(self):
        if abs(self.z.imag) > 1e-9:
            return "complex"
        return "fold" if self.z.real > 0 else "flip"

    def to_dict(self):
        return {"re": self.z.real, "im": self.z.imag, "residual": self.residual}


@dataclass(frozen=True, eq=False)
class StabilityReport:
    nu: float
    omega: float
    circle_sup: float
    xi1: complex
    secular_roots: tuple
    leading_eig: complex
    classification: str
    kappa: float
    gap: float
    xi1_gamma_defect: float
    contour: dict
    eigvec_at_one: Optional[Density] = field(default=None, repr=False)

    def to_dict(self):
        return {
            "nu": self.nu,
            "omega": self.omega,
            "circle_sup": self.circle_sup,
            "xi1": [self.xi1.real, self.xi1.imag],
            "secular_roots": [root.to_dict() for root in self.secular_roots],
            "leading_eig": [self.leading_eig.real, self.leading_eig.imag],
            "classification": self.classification,
            "kappa": self.kappa,
            "gap": self.gap,
            "xi1_gamma_defect": self.xi1_gamma_defect,
            "contour": self.contour,
        }


def _circle(radius, n):
    return radius * np.exp(1j * TWO_PI * np.arange(n) / n)


def _power_sums(secular, radius, n, count, workers):
    z = _circle(radius, n)
    f = secular.sample(z, workers=workers) - 1.0
    df = secular.sample(z, derivative=True, workers=workers)
    ratio = z * df / f
    return np.array([np.mean(ratio * z**p) for p in range(count + 1)]), float(np.min(np.abs(f)))


def _roots_from_power_sums(sums):
    """Newton identities: power sums s₁..s_N → monic polynomial → roots"""
    count = len(sums) - 1
    e = [1.0 + 0.0j]
    for k in range(1, count + 1):
        e.append(sum((-1) ** (i - 1) * e[k - i] * sums[i] for i in range(1, k + 1)) / k)
    coeffs = [(-1) ** k * e[k] for k in range(count + 1)]
    return np.roots(coeffs)


def _polish(secular, z, settings):
    for _ in range(settings.polish_max_iter):
        f = secular.exact(z) - 1.0
        if abs(f) <= settings.polish_tol:
            return complex(z), abs(f)
        z = z - f / secular.exact(z, derivative=True)
    residual = abs(secular.exact(z) - 1.0)
    if residual > 1e3 * settings.polish_tol:
        raise NoConvergence(f"secular root polishing stalled near z={complex(z):.8g}", residual=residual)
    return complex(z), residual


def _outer_radius(secular, lin, gap, settings):
    radius = 1.0 + lin.rank_one_norm() + gap
    for _ in range(8):
        edge = np.max(np.abs(secular.sample(_circle(radius, 64), workers=settings.workers)))
        if edge < 0.5:
            break
        radius *= 2.0
    return radius


def secular_roots(system, fixed_point, settings=None, linearized=None, secular=None, gap=None):
    """Roots of Ξ(z) = 1 with |z| above the inner radius; returns (roots, contour info)"""
    settings = settings or StabilitySettings()
    lin = linearized or linearize(system, fixed_point)
    secular = secular or SecularFunction(system, lin, settings.krylov_dim)
    if secular.trivial:
        return (), {"inner": settings.inner_radius, "outer": None, "points": 0}
    gap = spectral_gap_estimate(lin.op) if gap is None else gap
    inner = max(settings.inner_radius, 1.1 * gap)
    outer = _outer_radius(secular, lin, gap, settings)

    for attempt in range(settings.contour_retries + 1):
        n = settings.quadrature_points
        while True:
            outer_sums, outer_min = _power_sums(secular, outer, n, 0, settings.workers)
            inner_sums, inner_min = _power_sums(secular, inner, n, 0, settings.workers)
            count_estimate = (outer_sums[0] - inner_sums[0]).real
            if abs(count_estimate - round(count_estimate)) < 0.05 or n >= settings.max_quadrature_points:
                break
            n *= 2
        count = int(round(count_estimate))
        close = min(outer_min, inner_min) < settings.contour_margin or abs(count_estimate - count) >= 0.05
        roots = []
        if not close and count > 0:
            outer_sums, _ = _power_sums(secular, outer, n, count, settings.workers)
            inner_sums, _ = _power_sums(secular, inner, n, count, settings.workers)
            guesses = _roots_from_power_sums(outer_sums - inner_sums)
            roots = [_polish(secular, z, settings) for z in guesses]
            close = any(
                min(abs(abs(z) - inner), abs(abs(z) - outer)) < settings.contour_margin for z, _ in roots
            )
        if not close:
            found = tuple(
                SecularRoot(z, residual)
                for z, residual in sorted(roots, key=lambda item: -abs(item[0]))
                if abs(z) > settings.inner_radius
            )
            return found, {"inner": inner, "outer": outer, "points": n}
        logger.warning(f"Secular root within {settings.contour_margin:g} of a contour; perturbing radii")
        inner *= 1.0 + 0.01 * (attempt + 1)
        outer *= 1.0 + 0.01 * (attempt + 1)
    raise ContourTooClose(
        f"secular roots stay within {settings.contour_margin:g} of the contour after "
        f"{settings.contour_retries} perturbations",
        nu=fixed_point.nu,
        omega=fixed_point.omega,
    )


def eigvec_at_one(system, fixed_point, secular=None):
    """φ = h + Θ(1)∫αh / (1 - Ξ(1)) with 𝒟_hφ = φ"""
    secular = secular or SecularFunction(system, linearize(system, fixed_point))
    response = secular.response_at_one()
    xi1 = alpha_integral(system.model, response)
    return fixed_point.density + response * (alpha_integral(system.model, fixed_point.density) / (1.0 - xi1))


def eigvec_residual(linearized, phi):
    return (linearized.apply(phi) - phi).norm() / phi.norm()


def classify(system, fixed_point, settings=None, strict=False):
    settings = settings or StabilitySettings()
    lin = linearize(system, fixed_point)
    secular = SecularFunction(system, lin, settings.krylov_dim)
    gap = spectral_gap_estimate(lin.op)

    circle_sup = float(np.max(np.abs(secular.sample(_circle(1.0, settings.circle_points), workers=settings.workers))))
    xi1 = complex(secular.exact(1.0))
    roots, contour = secular_roots(system, fixed_point, settings, lin, secular, gap)

    if any(abs(root.z) > 1.0 + settings.tol for root in roots):
        classification = "unstable"
    elif circle_sup < 1.0 and abs(xi1 - 1.0) > settings.tol:
        classification = "physical"
    else:
        classification = "marginal"

    candidates = [root.z for root in roots] + [complex(gap)]
    leading = max(candidates, key=abs)
    inside = [abs(root.z) for root in roots if abs(root.z) < 1.0]
    kappa = max([gap] + inside)

    phi = None
    if abs(xi1 - 1.0) >= settings.tol:
        phi = eigvec_at_one(system, fixed_point, secular)

    report = StabilityReport(
        nu=fixed_point.nu,
        omega=fixed_point.omega,
        circle_sup=circle_sup,
        xi1=xi1,
        secular_roots=roots,
        leading_eig=complex(leading),
        classification=classification,
        kappa=float(kappa),
        gap=float(gap),
        xi1_gamma_defect=abs(xi1 - fixed_point.gamma),
        contour=contour,
        eigvec_at_one=phi,
    )
    logger.debug(
        f"nu={fixed_point.nu:.6g} omega={fixed_point.omega:.10g}: {classification}, "
        f"sup|Xi|={circle_sup:.4g}, {len(roots)} secular root(s)"
    )
    if strict and classification == "marginal":
        raise MarginalUndecidable(
            f"fixed point at nu={fixed_point.nu:g} lies on the stability boundary",
            nu=fixed_point.nu,
            omega=fixed_point.omega,
            xi1=xi1,
            circle_sup=circle_sup,
        )
    return report


def real_root_near(system, fixed_point, start=1.0, settings=None):
    """Polish the real secular root closest to `start`"""
    settings = settings or StabilitySettings()
    secular = SecularFunction(system, linearize(system, fixed_point), settings.krylov_dim)
    z, _ = _polish(secular, complex(start), settings)
    return z


def fold_root_slope(system, fold, delta=None, settings=None):
    """dz/dτ of the real secular root through 1 at a fold, by centered differences on the chart τ = ν - ω"""
    from continuation import _lambda_chart_omega
    from meanfield import fixed_point_record

    delta = delta or 1e-3 / max(fold.nu, 1.0)
    tau0 = fold.nu - fold.omega
    roots = []
    for sign in (-1.0, 1.0):
        omega = _lambda_chart_omega(system, tau0 + sign * delta, fold.omega)
        record = fixed_point_record(system, tau0 + sign * delta + omega, omega)
        roots.append(real_root_near(system, record, 1.0, settings).real)
    return (roots[1] - roots[0]) / (2.0 * delta)


def dense_secular_check(system, fixed_point, settings=None, separation=1e-6):
    """Eigenvalues of dense 𝒟_h outside dense σ(𝓛) against the secular roots"""
    settings = settings or StabilitySettings()
    lin = linearize(system, fixed_point)
    frozen = np.linalg.eigvals(dense_matrix(lin.op))
    perturbed = np.linalg.eigvals(lin.dense())
    outside = [
        z for z in perturbed
        if abs(z) > settings.inner_radius and np.min(np.abs(frozen - z)) > separation
    ]
    roots, _ = secular_roots(system, fixed_point, settings, lin)
    found = [root.z for root in roots]
    unmatched_dense = [z for z in outside if not found or min(abs(z - w) for w in found) > 1e-8]
    unmatched_roots = [w for w in found if not outside or min(abs(z - w) for z in outside) > 1e-8]
    distance = max(
        [min(abs(z - w) for w in found) for z in outside if found] + [0.0]
    )
    return {
        "dense": outside,
        "secular": found,
        "max_distance": distance,
        "unmatched_dense": unmatched_dense,
        "unmatched_secular": unmatched_roots,
    }

