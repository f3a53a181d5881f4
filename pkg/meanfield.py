"""Mean-field self-consistency for the coupled maps.

The coupled map depends on a density h only through ω = ∫α h, so every
fixed point of the nonlinear operator h ↦ 𝓛_{T_{ν,h}} h is H(ν,ω) for a root
of ω = M(ν,ω) := ∫α H(ν,ω), where H(ν,ω) is the invariant density of the
frozen map T_{ν,ω}. The response field

    Θ(ν,ω) = -(I - 𝓛)⁻¹ div(𝓛 β H)

is ∂H/∂(νω), which gives ∂_ωH = νΘ, ∂_νH = ωΘ and Γ = ν∫αΘ = ∂M/∂ω.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache

from errors import NoConvergence
from transfer import (
    Density,
    GalerkinBasis,
    TransferOp,
    alpha_integral,
    directional_derivative,
    divergence_coupling,
    resolvent_solve,
    srb_density,
)

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = {1: 128, 2: 64}


@dataclass(frozen=True)
class MeanFieldSystem:
    model: object
    basis: GalerkinBasis
    srb_tol: float = 1e-12
    srb_max_iter: int = 200
    resolvent_tol: float = 1e-12
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    cutoff_tol: float = 1e-8

    def transfer(self, nu, omega):
        return TransferOp(self.model, self.basis, float(nu), float(omega))

    def Z(self, h):
        """∫α h (real part)"""
        return alpha_integral(self.model, h).real


def build_system(model, K=None, oversample=2, mollifier_fraction=0.25, **tolerances):
    basis = GalerkinBasis(model.dim, K or DEFAULT_CUTOFF[model.dim], oversample, mollifier_fraction)
    return MeanFieldSystem(model, basis, **tolerances)


@dataclass(frozen=True)
class FixedPointRecord:
    nu: float
    omega: float
    density: Density = field(repr=False)
    residual: float
    gamma: float
    xi1: complex

    def to_row(self):
        return {
            "nu": self.nu,
            "omega": self.omega,
            "residual": self.residual,
            "gamma": self.gamma,
            "xi1_re": self.xi1.real,
            "xi1_im": self.xi1.imag,
        }


@dataclass(frozen=True)
class CycleReport:
    period: int
    omegas: tuple
    distance: float
    steps: int


@lru_cache(maxsize=128)
def frozen_srb(system, nu, omega):
    """H(ν,ω): invariant density of the frozen map T_{ν,ω}"""
    op = system.transfer(nu, omega)
    return srb_density(op, system.srb_tol, system.srb_max_iter, cutoff_tol=system.cutoff_tol)


def mean_field_map(system, nu, omega):
    """M(ν,ω) = ∫α H(ν,ω)"""
    return system.Z(frozen_srb(system, float(nu), float(omega)))


@lru_cache(maxsize=128)
def theta(system, nu, omega):
    """Θ(ν,ω) = -(I - 𝓛)⁻¹ div(𝓛 β H), mean-zero"""
    op = system.transfer(nu, omega)
    coupling = divergence_coupling(op, frozen_srb(system, nu, omega))
    return -resolvent_solve(op, 1.0, coupling, tol=system.resolvent_tol)


def gamma(system, nu, omega):
    """Γ = ν∫αΘ; the branch folds where Γ = 1"""
    return nu * system.Z(theta(system, float(nu), float(omega)))


def mean_field_derivatives(system, nu, omega):
    """(M, ∂_νM, ∂_ωM) at (ν,ω)"""
    nu, omega = float(nu), float(omega)
    z_theta = system.Z(theta(system, nu, omega))
    return mean_field_map(system, nu, omega), omega * z_theta, nu * z_theta


def second_shift_derivative(system, nu, omega):
    """∂²H/∂s² along the shift s = νω: (I - 𝓛)⁻¹[(β·∇)²𝓛H - 2 div(𝓛βΘ)]"""
    op = system.transfer(nu, omega)
    beta = system.model.beta
    image = op.apply(frozen_srb(system, nu, omega))
    response = op.apply(theta(system, nu, omega))
    rhs = directional_derivative(image, beta, 2) - 2.0 * directional_derivative(response, beta, 1)
    return resolvent_solve(op, 1.0, rhs, tol=system.resolvent_tol)


def mean_field_curvature(system, nu, omega):
    """∂²M/∂ω² = ν² ∫α ∂²_sH"""
    nu, omega = float(nu), float(omega)
    return nu**2 * system.Z(second_shift_derivative(system, nu, omega))


def residual_F(system, nu, h):
    """F(ν,h) = h - H(ν, ∫αh)"""
    return h - frozen_srb(system, float(nu), system.Z(h))


def nonlinear_step(system, nu, h):
    """One application of the nonlinear operator h ↦ 𝓛_{T_{ν,∫αh}} h"""
    return system.transfer(nu, system.Z(h)).apply(h)


def dF_dh(system, nu, h, phi):
    """D_hF(φ) = φ - νΘ ∫αφ"""
    response = theta(system, float(nu), system.Z(h))
    return phi - (nu * alpha_integral(system.model, phi)) * response


def inverse_dF_dh(system, nu, h, psi):
    """Closed-form inverse of D_hF: ψ + νΘ ∫αψ / (1 - Γ)"""
    omega = system.Z(h)
    response = theta(system, float(nu), omega)
    fold = gamma(system, nu, omega)
    if fold == 1.0:
        raise ZeroDivisionError("D_hF is not invertible at a fold (Γ = 1)")
    return psi + (nu * alpha_integral(system.model, psi) / (1.0 - fold)) * response


def dF_dnu(system, nu, h):
    """∂_νF = -Θ ∫αh"""
    omega = system.Z(h)
    return -omega * theta(system, float(nu), omega)


def d2F_dh2_along_theta(system, nu, h):
    """D²_hF(Θ,Θ) = -ν² (∫αΘ)² ∂²_sH"""
    nu, omega = float(nu), system.Z(h)
    z_theta = system.Z(theta(system, nu, omega))
    return -(nu * z_theta) ** 2 * second_shift_derivative(system, nu, omega)


def fold_curvature(system, nu, omega):
    """ν″(τ₀) = ν₀³ ∫α D²_hF(Θ,Θ) / ω₀ in the chart τ = ν - ω"""
    h = frozen_srb(system, float(nu), float(omega))
    return nu**3 * system.Z(d2F_dh2_along_theta(system, nu, h)) / omega


def _secular_value(system, nu, omega, h, z, derivative=False):
    op = system.transfer(nu, omega)
    coupling = divergence_coupling(op, h)
    solved = resolvent_solve(op, z, coupling, tol=system.resolvent_tol)
    if derivative:
        solved = resolvent_solve(op, z, solved, tol=system.resolvent_tol)
        return nu * alpha_integral(system.model, solved)
    return -nu * alpha_integral(system.model, solved)


def xi(system, fixed_point, z, derivative=False):
    """Secular function Ξ(z) = -ν ∫α (z - 𝓛)⁻¹ div(𝓛βh), or ∂_zΞ"""
    return _secular_value(
        system, fixed_point.nu, fixed_point.omega, fixed_point.density, z, derivative
    )


def fixed_point_record(system, nu, omega, density=None):
    nu, omega = float(nu), float(omega)
    h = density if density is not None else frozen_srb(system, nu, omega)
    residual = abs(omega - mean_field_map(system, nu, omega))
    xi1 = complex(_secular_value(system, nu, omega, h, 1.0))
    return FixedPointRecord(nu, omega, h, residual, gamma(system, nu, omega), xi1)


def solve_fixed_point(system, nu, omega0):
    """Newton on ω - M(ν,ω) = 0 with slope 1 - Γ"""
    omega = float(omega0)
    for iteration in range(system.newton_max_iter):
        value, _, slope = mean_field_derivatives(system, nu, omega)
        residual = omega - value
        if abs(residual) <= system.newton_tol:
            logger.debug(f"Fixed point at nu={nu:g}: omega={omega:.15g} after {iteration} Newton steps")
            return fixed_point_record(system, nu, omega)
        omega -= residual / (1.0 - slope)
    raise NoConvergence(
        f"Newton on the mean-field equation did not converge at nu={nu:g}",
        residual=abs(residual),
        nu=nu,
    )


def verify_fixed_point(system, record, tol=1e-8):
    """Both directions of F(ν,h)=0 ⇔ {ω = M(ν,ω), h = H(ν,ω)}; returns (ok, margins)"""
    h = record.density
    margins = {
        "omega_vs_alpha_integral": abs(record.omega - system.Z(h)),
        "scalar_residual": abs(record.omega - mean_field_map(system, record.nu, record.omega)),
        "density_vs_frozen_srb": (h - frozen_srb(system, record.nu, record.omega)).norm(),
        "F_norm": residual_F(system, record.nu, h).norm(),
        "nonlinear_step_change": (nonlinear_step(system, record.nu, h) - h).norm(),
    }
    return all(value <= tol for value in margins.values()), margins


def find_fixed_by_iteration(system, nu, h0, max_steps=200, tol=1e-10, max_period=8):
    """Iterate the nonlinear operator; returns a FixedPointRecord or a CycleReport"""
    history = [h0]
    h = h0
    for step in range(1, max_steps + 1):
        h = nonlinear_step(system, nu, h)
        scale = max(h.norm(), 1e-300)
        change = (h - history[-1]).norm()
        if change <= tol * scale:
            logger.info(f"Nonlinear iteration at nu={nu:g} converged in {step} steps")
            return fixed_point_record(system, nu, system.Z(h), density=h)
        for period in range(2, min(max_period, len(history)) + 1):
            distance = (h - history[-period]).norm()
            if distance <= tol * scale:
                omegas = tuple(system.Z(state) for state in history[-period + 1:]) + (system.Z(h),)
                logger.info(f"Nonlinear iteration at nu={nu:g} entered a {period}-cycle after {step} steps")
                return CycleReport(period, omegas, distance, step)
        history = history[-max_period:] + [h]
    raise NoConvergence(
        f"nonlinear iteration did not settle in {max_steps} steps at nu={nu:g}",
        residual=change,
        nu=nu,
    )


def theta_nonzero(system, nu, omega, floor=1e-12):
    """Θ ≢ 0 check used in place of the irrational-direction argument"""
    return theta(system, float(nu), float(omega)).norm() > floor


def leading_coefficients(system, nu, omega):
    """Exact (M, Γ) next to their closed-form leading-order values"""
    from model import leading_order_mean_field

    m0, g0 = leading_order_mean_field(system.model, nu, omega)
    return {
        "M": mean_field_map(system, nu, omega),
        "M0": float(m0),
        "gamma": gamma(system, nu, omega),
        "gamma0": float(g0),
    }
