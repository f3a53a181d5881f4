"""Coupled-map families on the torus [0, 2π)^d.

Two families are supported: the 2D Anosov example T = ρ∘A^{n*}∘ρ⁻¹ with a
hyperbolic A in SL(2, Z), and a 1D expanding family x ↦ a·x conjugated the
same way. Both are coupled through the mean field ω = ∫α h by the shift
x ↦ x + νβω.
"""
import logging
import math
from dataclasses import dataclass, asdict
from functools import cached_property

import numpy as np

from errors import ConfigError, NoConvergence, NonHyperbolic, RhoNotDiffeo, ZeroLattice

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi

MODEL_DEFAULTS = {
    2: {"A": [[2, 1], [1, 1]], "n_star": 10, "mu": 0.05, "k": [0, 1]},
    1: {"A": [[2]], "n_star": 1, "mu": 0.3, "k": [1]},
}

BETA_MODES = ("lattice", "unstable")

# nu_max = NU_MAX_CONSTANT / mu**2
NU_MAX_CONSTANT = 1.0
NU_MAX_FALLBACK = 400.0


@dataclass(frozen=True)
class ModelSpec:
    dim: int
    A: tuple
    n_star: int
    mu: float
    k: tuple
    nu_max: float
    beta_mode: str = "lattice"

    @cached_property
    def matrix(self):
        return np.array(self.A, dtype=np.int64)

    @cached_property
    def power(self):
        """Integer matrix A^{n*}"""
        return np.linalg.matrix_power(self.matrix, self.n_star)

    @cached_property
    def k_vec(self):
        return np.array(self.k, dtype=float)

    @cached_property
    def k_norm(self):
        return float(np.linalg.norm(self.k_vec))

    @cached_property
    def theta(self):
        """Angle ϑ with a(x) = -|k| cos(<k,x> + ϑ)"""
        if self.dim == 2:
            return math.atan2(self.k[0], self.k[1]) % (2.0 * math.pi)
        return 0.5 * math.pi if self.k[0] > 0 else 1.5 * math.pi

    @cached_property
    def beta(self):
        """Displacement direction of the mean-field shift"""
        if self.beta_mode == "unstable":
            values, vectors = np.linalg.eig(self.matrix.astype(float))
            vec = np.real(vectors[:, int(np.argmax(np.abs(values)))])
            vec = vec / np.linalg.norm(vec)
            return vec if vec[np.flatnonzero(vec)[0]] > 0 else -vec
        return self.k_vec / self.k_norm

    @cached_property
    def k_dot_beta(self):
        return float(self.k_vec @ self.beta)

    def to_dict(self):
        data = asdict(self)
        data["A"] = [list(row) for row in self.A]
        data["k"] = list(self.k)
        return data


def build_model(config=None):
    """Validate a `model` config section and return a ModelSpec"""
    config = dict(config or {})
    dim = int(config.get("dim") or len(config.get("A") or MODEL_DEFAULTS[2]["A"]))
    if dim not in MODEL_DEFAULTS:
        raise ConfigError(f"model.dim must be 1 or 2, got {dim}", key="model.dim")

    merged = {**MODEL_DEFAULTS[dim], **{key: value for key, value in config.items() if value is not None}}

    try:
        A = np.array(merged["A"])
        k = np.array(merged["k"]).reshape(-1)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model.A and model.k must be integer arrays: {e}", key="model.A")
    if A.shape != (dim, dim) or not np.all(np.mod(A, 1) == 0):
        raise ConfigError(f"model.A must be an integer {dim}x{dim} matrix", key="model.A")
    if k.shape != (dim,) or not np.all(np.mod(k, 1) == 0):
        raise ConfigError(f"model.k must be an integer vector of length {dim}", key="model.k")
    A = A.astype(np.int64)
    k = k.astype(np.int64)

    if not np.any(k):
        raise ZeroLattice("coupling lattice vector k must be nonzero", key="model.k")

    if dim == 2:
        det = int(round(np.linalg.det(A)))
        trace = int(np.trace(A))
        if det != 1 or trace <= 2:
            raise NonHyperbolic(
                f"A must have det 1 and trace > 2 (det={det}, trace={trace})", key="model.A"
            )
    elif abs(int(A[0, 0])) < 2:
        raise NonHyperbolic(f"1D map x -> {int(A[0, 0])}x is not expanding", key="model.A")

    n_star = merged["n_star"]
    if int(n_star) != n_star or n_star < 1:
        raise ConfigError("model.n_star must be a positive integer", key="model.n_star")

    mu = float(merged["mu"])
    k_norm = float(np.linalg.norm(k))
    if mu < 0:
        raise ConfigError("model.mu must be non-negative", key="model.mu")
    if mu * k_norm >= 1.0:
        raise RhoNotDiffeo(f"rho is not a diffeomorphism: mu*|k| = {mu * k_norm:.3g} >= 1", key="model.mu")

    beta_mode = merged.get("beta_mode", "lattice")
    if beta_mode not in BETA_MODES:
        raise ConfigError(f"model.beta_mode must be one of {BETA_MODES}", key="model.beta_mode")
    if beta_mode == "unstable" and dim != 2:
        raise ConfigError("beta_mode 'unstable' needs the 2D family", key="model.beta_mode")

    nu_max = merged.get("nu_max")
    if nu_max is None:
        nu_max = NU_MAX_CONSTANT / mu**2 if mu > 0 else NU_MAX_FALLBACK
    if nu_max <= 0:
        raise ConfigError("model.nu_max must be positive", key="model.nu_max")

    model = ModelSpec(
        dim=dim,
        A=tuple(tuple(int(v) for v in row) for row in A),
        n_star=int(n_star),
        mu=mu,
        k=tuple(int(v) for v in k),
        nu_max=float(nu_max),
        beta_mode=beta_mode,
    )
    logger.debug(f"Built model {model.to_dict()}")
    return model


def to_torus(x):
    """Reduce coordinates to [0, 2π)"""
    x = np.mod(np.asarray(x, dtype=float), TWO_PI)
    # mod can round up to exactly 2π for tiny negative inputs
    return np.where(x >= TWO_PI, 0.0, x)


def torus_distance(x, y):
    """Componentwise distance on the circle, maximum over axes"""
    d = np.abs(np.mod(np.asarray(x, dtype=float) - np.asarray(y, dtype=float) + np.pi, TWO_PI) - np.pi)
    return d.max(axis=-1)


def _dot_k(model, v):
    # elementwise: a point's result is independent of its position in the array
    return np.asarray(np.sum(v * model.k_vec, axis=-1))


def phase(model, x):
    return _dot_k(model, np.asarray(x, dtype=float))


def chi(model, x):
    theta = phase(model, x)
    if model.dim == 2:
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return np.cos(theta)[..., None]


def _chi_tangent(model, theta):
    # dχ/dθ; Dχ = u kᵀ
    if model.dim == 2:
        return np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    return -np.sin(theta)[..., None]


def alpha_values(model, x):
    return 1.0 - np.cos(phase(model, x))


def rho(model, x):
    """Conjugacy ρ(x) = x + μχ(x) on the lift (no reduction)"""
    x = np.asarray(x, dtype=float)
    return x + model.mu * chi(model, x)


def rho_jacobian(model, x):
    """J(x) = det Dρ(x) = 1 + μ Tr Dχ(x)"""
    theta = phase(model, x)
    return 1.0 + model.mu * _dot_k(model, _chi_tangent(model, theta))


def invert_rho(model, y, tol=1e-12, max_iter=50, wrap=True):
    """Solve ρ(x) = y by Newton iteration seeded at y - μχ(y)"""
    y = np.asarray(y, dtype=float)
    if model.mu == 0.0:
        return to_torus(y) if wrap else y.copy()

    shape = y.shape
    targets = y.reshape(-1, model.dim)
    x = targets - model.mu * chi(model, targets)
    # points leave the iteration once their own residual is below tol
    pending = np.arange(len(x))
    for iteration in range(max_iter + 1):
        residual = rho(model, x[pending]) - targets[pending]
        active = np.max(np.abs(residual), axis=-1) > tol
        pending, residual = pending[active], residual[active]
        if not len(pending):
            break
        if iteration == max_iter:
            raise NoConvergence(
                f"rho inversion did not reach tol={tol:g} in {max_iter} iterations",
                residual=float(np.max(np.abs(residual))),
                iterations=max_iter,
            )
        u = model.mu * _chi_tangent(model, phase(model, x[pending]))
        # Sherman-Morrison for (I + μ u kᵀ)
        k_dot_r = _dot_k(model, residual)
        k_dot_u = _dot_k(model, u)
        x[pending] -= residual - u * np.asarray(k_dot_r / (1.0 + k_dot_u))[..., None]
    x = x.reshape(shape)
    return to_torus(x) if wrap else x


def apply_linear(model, y):
    """A^{n*}y one factor at a time, reduced mod 2π after each factor"""
    rows = model.matrix.astype(float)
    columns = [np.array(y[..., axis], dtype=float) for axis in range(model.dim)]
    # coordinate arrays only: each point sees the same operations wherever it sits
    for _ in range(model.n_star):
        columns = [np.mod(sum(row[j] * columns[j] for j in range(model.dim)), TWO_PI) for row in rows]
    return np.stack(columns, axis=-1)


def apply_coupled_map(model, nu, omega, x):
    """T_{ν,ω}(x) = ρ(A^{n*} ρ⁻¹(x)) + νβω mod 2π"""
    y = apply_linear(model, invert_rho(model, x))
    z = rho(model, y) + nu * np.asarray(omega, dtype=float)[..., None] * model.beta
    return to_torus(z)


def coefficients_ab(model, x):
    """Coefficients of det Dρ⁻¹(x) = 1 + a(x)μ + b(x)μ² + O(μ³)

    a = -Tr Dχ and b = ½[Tr(Dχ²) + (Tr Dχ)² + 2<∇Tr Dχ, χ>]. Since Dχ = u kᵀ
    is rank one, b reduces to (k·u)² - (k·χ)².
    """
    theta = phase(model, x)
    k_dot_u = _dot_k(model, _chi_tangent(model, theta))
    k_dot_chi = _dot_k(model, chi(model, x))
    return -k_dot_u, k_dot_u**2 - k_dot_chi**2


def uncoupled_srb_values(model, y):
    """Exact invariant density of ρ∘A^{n*}∘ρ⁻¹ up to the A^{n*} mixing error: det Dρ⁻¹(y)/(2π)^d"""
    x = invert_rho(model, y, wrap=False)
    return 1.0 / rho_jacobian(model, x) / TWO_PI**model.dim


def leading_order_mean_field(model, nu, omega):
    """Closed-form M₀(ν,ω) and Γ₀ = ∂M₀/∂ω from ∫α (1 + μ a∘Φ₋)"""
    phi = model.k_dot_beta * nu * np.asarray(omega, dtype=float) - model.theta
    m0 = 1.0 + 0.5 * model.mu * model.k_norm * np.cos(phi)
    g0 = -0.5 * model.mu * model.k_norm * model.k_dot_beta * nu * np.sin(phi)
    return m0, g0


def perturbative_density(model, nu, omega, K=32, basis=None):
    """Second-order closed form of the frozen SRB: 1 + μ a∘Φ₋ + μ² b∘Φ₋, normalized"""
    from transfer import Density, GalerkinBasis

    if basis is None:
        basis = GalerkinBasis(model.dim, K)
    shifted = basis.collocation_points() - nu * omega * model.beta
    a, b = coefficients_ab(model, shifted)
    values = 1.0 + model.mu * a + model.mu**2 * b
    return Density.from_grid(basis, values).normalized()
