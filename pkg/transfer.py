"""Fourier-Galerkin densities and the matrix-free transfer operator.

Densities are truncated Fourier series h(x) = Σ c_k e^{i<k,x>} over modes
|k_i| ≤ K, stored as a flat coefficient vector in row-major order over the
centered mode lattice. The transfer operator of T = Φ∘ρ∘A^{n*}∘ρ⁻¹ is applied
factor by factor:

    𝓛_T = 𝓛_Φ 𝓛_ρ 𝓛_{A^{n*}} 𝓛_{ρ⁻¹}

𝓛_Φ is a modewise phase, 𝓛_{A^{n*}} relocates mode Aᵀk to k, and the two
conjugacy factors are evaluated in weak form,

    (𝓛_S g)ˆ(k) = (2π)^{-d} ∫ g(y) e^{-i<k, S(y)>} dy,

by trapezoidal quadrature on an oversampled grid. Only the source modes that
survive the relocation are ever computed.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import pandas as pd
import scipy.fft as sp_fft
from scipy.sparse.linalg import LinearOperator, gmres

from errors import CutoffTooSmall, NoConvergence, SolverStall
from model import TWO_PI, invert_rho, rho

logger = logging.getLogger(__name__)

MIN_CUTOFF = 4
MASS_DRIFT_WARN = 1e-10
# complex entries held by one exponential table chunk
CHUNK_ENTRIES = 2**21
# above this many entries the pushforward columns are not cached
PUSH_TABLE_LIMIT = 4_000_000


@dataclass(frozen=True)
class GalerkinBasis:
    dim: int
    K: int
    oversample: int = 2
    mollifier_fraction: float = 0.25

    def __post_init__(self):
        if self.K < MIN_CUTOFF:
            raise CutoffTooSmall(f"mode cutoff K={self.K} is below {MIN_CUTOFF}", K=self.K)
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")

    @property
    def side(self):
        return 2 * self.K + 1

    @property
    def size(self):
        return self.side**self.dim

    @property
    def zero_index(self):
        return self.size // 2

    @property
    def n_grid(self):
        return 2 * self.K + 2

    @property
    def n_quad(self):
        return self.oversample * self.n_grid

    @cached_property
    def modes(self):
        """Integer mode table, shape (size, dim), row-major over k₁ then k₂"""
        grids = np.indices((self.side,) * self.dim).reshape(self.dim, -1).T
        return grids - self.K

    @cached_property
    def mollifier(self):
        """Raised-cosine weights, 1 in the inner modes and 0 at |k_i| = K"""
        start = (1.0 - self.mollifier_fraction) * self.K
        width = self.mollifier_fraction * self.K
        m = np.abs(self.modes).astype(float)
        ramp = np.clip((m - start) / width, 0.0, 1.0)
        return np.prod(0.5 * (1.0 + np.cos(np.pi * ramp)), axis=1)

    def index(self, mode):
        mode = np.atleast_1d(np.asarray(mode, dtype=int))
        if mode.shape != (self.dim,) or np.any(np.abs(mode) > self.K):
            raise CutoffTooSmall(f"mode {tuple(mode)} lies outside cutoff K={self.K}", K=self.K)
        flat = 0
        for value in mode:
            flat = flat * self.side + int(value) + self.K
        return flat

    def mirror(self, coeffs):
        """Coefficients at -k (the mode table is symmetric about its center)"""
        return coeffs[::-1]

    def points(self, n):
        axis = TWO_PI * np.arange(n) / n
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, self.dim)

    def collocation_points(self):
        return self.points(self.n_grid)

    def quadrature_points(self):
        return self.points(self.n_quad)

    def _slots(self, n):
        return tuple(self.modes[:, axis] % n for axis in range(self.dim))

    def to_grid(self, coeffs, n=None):
        """Values Σ c_k e^{i<k,x>} on the n^d grid (complex, row-major flat)"""
        n = n or self.n_grid
        spectrum = np.zeros((n,) * self.dim, dtype=complex)
        spectrum[self._slots(n)] = coeffs
        return sp_fft.ifftn(spectrum).reshape(-1) * n**self.dim

    def from_grid(self, values, n=None):
        n = n or self.n_grid
        values = np.asarray(values).reshape((n,) * self.dim)
        spectrum = sp_fft.fftn(values) / n**self.dim
        return spectrum[self._slots(n)]


@dataclass(frozen=True, eq=False)
class Density:
    """Truncated Fourier series on the torus (probability density or tangent vector)"""

    basis: GalerkinBasis
    coeffs: np.ndarray = field(repr=False)

    @classmethod
    def constant(cls, basis, mass=1.0):
        coeffs = np.zeros(basis.size, dtype=complex)
        coeffs[basis.zero_index] = mass / TWO_PI**basis.dim
        return cls(basis, coeffs)

    @classmethod
    def zeros(cls, basis):
        return cls(basis, np.zeros(basis.size, dtype=complex))

    @classmethod
    def mode(cls, basis, k, amplitude=1.0):
        coeffs = np.zeros(basis.size, dtype=complex)
        coeffs[basis.index(k)] = amplitude
        return cls(basis, coeffs)

    @classmethod
    def from_grid(cls, basis, values):
        return cls(basis, basis.from_grid(values))

    @property
    def mode_cutoff(self):
        return self.basis.K

    @property
    def mass(self):
        return float((self.coeffs[self.basis.zero_index] * TWO_PI**self.basis.dim).real)

    def coeff(self, k):
        return complex(self.coeffs[self.basis.index(k)])

    def grid_view(self):
        """Real samples on the (2K+2)^d collocation grid"""
        shape = (self.basis.n_grid,) * self.basis.dim
        return self.basis.to_grid(self.coeffs).real.reshape(shape)

    def values(self, n=None):
        return self.basis.to_grid(self.coeffs, n)

    def normalized(self):
        mass = self.mass
        if mass == 0.0:
            raise ValueError("cannot normalize a density with zero mass")
        return Density(self.basis, self.coeffs / mass)

    def mean_zero(self):
        coeffs = self.coeffs.copy()
        coeffs[self.basis.zero_index] = 0.0
        return Density(self.basis, coeffs)

    def norm(self):
        """L² norm on the torus"""
        return float(np.sqrt(TWO_PI**self.basis.dim) * np.linalg.norm(self.coeffs))

    def hermitian_defect(self):
        return float(np.max(np.abs(self.basis.mirror(self.coeffs) - np.conj(self.coeffs))))

    def tail_fraction(self):
        """Share of the L² energy carried by the mollified band"""
        band = self.basis.mollifier < 1.0
        total = np.sum(np.abs(self.coeffs) ** 2)
        return float(np.sum(np.abs(self.coeffs[band]) ** 2) / total) if total > 0 else 0.0

    def to_frame(self):
        frame = pd.DataFrame(self.basis.modes, columns=[f"k{axis + 1}" for axis in range(self.basis.dim)])
        frame["re"] = self.coeffs.real
        frame["im"] = self.coeffs.imag
        return frame

    @classmethod
    def from_frame(cls, frame):
        mode_columns = [column for column in frame.columns if column.startswith("k")]
        dim = len(mode_columns)
        K = int(frame[mode_columns].abs().to_numpy().max())
        basis = GalerkinBasis(dim, K)
        coeffs = np.zeros(basis.size, dtype=complex)
        for row in frame.itertuples(index=False):
            mode = [getattr(row, column) for column in mode_columns]
            coeffs[basis.index(mode)] = complex(row.re, row.im)
        return cls(basis, coeffs)

    def _check(self, other):
        if other.basis != self.basis:
            raise ValueError("densities live on different Galerkin bases")

    def __add__(self, other):
        self._check(other)
        return Density(self.basis, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return Density(self.basis, self.coeffs - other.coeffs)

    def __mul__(self, scalar):
        return Density(self.basis, self.coeffs * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return Density(self.basis, self.coeffs / scalar)

    def __neg__(self):
        return Density(self.basis, -self.coeffs)


def constant_density(basis):
    return Density.constant(basis)


def mode_density(basis, k):
    return Density.mode(basis, k)


def alpha_row(model, basis):
    """Row vector a with ∫α h = a·c for α = 1 - cos<k,x>"""
    row = np.zeros(basis.size, dtype=complex)
    scale = TWO_PI**basis.dim
    row[basis.zero_index] = scale
    row[basis.index(model.k)] -= 0.5 * scale
    row[basis.index(tuple(-v for v in model.k))] -= 0.5 * scale
    return row


def alpha_integral(model, h):
    """Z(h) = ∫α h read off the modes 0 and ±k"""
    basis = h.basis
    scale = TWO_PI**basis.dim
    plus = h.coeffs[basis.index(model.k)]
    minus = h.coeffs[basis.index(tuple(-v for v in model.k))]
    return complex(scale * (h.coeffs[basis.zero_index] - 0.5 * (plus + minus)))


def directional_derivative(h, beta, order=1):
    """(β·∇)^order h, i.e. multiplication by (i<k,β>)^order"""
    symbol = 1j * (h.basis.modes @ np.asarray(beta, dtype=float))
    return Density(h.basis, h.coeffs * symbol**order)


def _exp_sum(values, points, modes):
    """Σ_y values[y] exp(-i<k, points[y]>) for each row k of modes (direct, chunked)"""
    out = np.zeros(len(modes), dtype=complex)
    rows = max(1, CHUNK_ENTRIES // max(len(points), 1))
    for start in range(0, len(modes), rows):
        block = modes[start:start + rows]
        table = np.exp(-1j * (points @ block.T))
        out[start:start + rows] = values @ table
    return out


def _exp_sum_separable(values, points, basis):
    """Same sum over the full 2D mode table, one axis at a time"""
    krange = np.arange(-basis.K, basis.K + 1)
    result = np.zeros((basis.side, basis.side), dtype=complex)
    step = max(1, CHUNK_ENTRIES // basis.side)
    for start in range(0, len(points), step):
        chunk = points[start:start + step]
        first = np.exp(-1j * np.outer(chunk[:, 0], krange))
        second = np.exp(-1j * np.outer(chunk[:, 1], krange))
        result += (first * values[start:start + step, None]).T @ second
    return result.reshape(-1)


def weak_form_coefficients(values, points, basis, subset=None):
    """(2π)^{-d}∫ g(y) e^{-i<k,S(y)>} dy for quadrature samples g(y) and displaced points S(y)"""
    n_points = len(points)
    if subset is not None and (basis.dim == 1 or len(subset) <= basis.side):
        return _exp_sum(values, points, basis.modes[subset]) / n_points
    if basis.dim == 1:
        full = _exp_sum(values, points, basis.modes) / n_points
    else:
        full = _exp_sum_separable(values, points, basis) / n_points
    return full if subset is None else full[subset]


class CompositionTables:
    """Displaced quadrature points and relocation maps for one (model, basis) pair"""

    def __init__(self, model, basis):
        self.model = model
        self.basis = basis
        quad = basis.quadrature_points()
        self.n_points = len(quad)
        self.pull_points = invert_rho(model, quad, wrap=False)
        self.push_points = rho(model, quad)

        # (𝓛_A g)ˆ(k) = ĝ(Aᵀk); keep k whose source mode Aᵀk is still resolved
        sources = basis.modes @ model.power
        inside = np.all(np.abs(sources) <= basis.K, axis=1)
        self.targets = np.flatnonzero(inside)
        self.sources = np.array([basis.index(mode) for mode in sources[inside]], dtype=int)
        self.push_columns = None
        if len(self.targets) * basis.size <= PUSH_TABLE_LIMIT:
            self.push_columns = self._build_push_columns(quad)
        logger.debug(
            f"Composition tables: K={basis.K}, {len(self.targets)} surviving modes, "
            f"{self.n_points} quadrature points"
        )

    def _build_push_columns(self, quad):
        columns = np.empty((self.basis.size, len(self.targets)), dtype=complex)
        for j, target in enumerate(self.targets):
            wave = np.exp(1j * (quad @ self.basis.modes[target]))
            columns[:, j] = weak_form_coefficients(wave, self.push_points, self.basis)
        return columns


@lru_cache(maxsize=16)
def composition_tables(model, basis):
    return CompositionTables(model, basis)


@dataclass(frozen=True, eq=False)
class TransferOp:
    """𝓛 for the frozen map T_{ν,ω} = Φ_{νβω}∘ρ∘A^{n*}∘ρ⁻¹"""

    model: object
    basis: GalerkinBasis
    nu: float = 0.0
    omega: float = 0.0
    mollify: bool = True

    def __post_init__(self):
        if self.model.dim != self.basis.dim:
            raise ValueError("model and basis dimensions differ")
        if np.any(np.abs(np.asarray(self.model.k)) > self.basis.K):
            raise CutoffTooSmall(
                f"coupling mode k={self.model.k} lies outside cutoff K={self.basis.K}", K=self.basis.K
            )

    @property
    def tables(self):
        return composition_tables(self.model, self.basis)

    @cached_property
    def shift_phase(self):
        shift = self.nu * self.omega * self.model.beta
        return np.exp(-1j * (self.basis.modes @ shift))

    def apply_coeffs(self, coeffs):
        basis = self.basis
        tables = self.tables
        weights = basis.mollifier if self.mollify else np.ones(basis.size)
        coeffs = np.asarray(coeffs, dtype=complex)

        # 𝓛_{ρ⁻¹}, only on the modes the relocation keeps
        samples = basis.to_grid(coeffs, basis.n_quad)
        pulled = weak_form_coefficients(samples, tables.pull_points, basis, tables.sources)
        pulled = pulled * weights[tables.sources]

        # 𝓛_{A^{n*}}
        relocated = pulled * weights[tables.targets]

        # 𝓛_ρ
        if tables.push_columns is not None:
            pushed = tables.push_columns @ relocated
        else:
            spread = np.zeros(basis.size, dtype=complex)
            spread[tables.targets] = relocated
            pushed = weak_form_coefficients(basis.to_grid(spread, basis.n_quad), tables.push_points, basis)
        pushed = pushed * weights

        # 𝓛_Φ
        out = pushed * self.shift_phase

        zero = basis.zero_index
        drift = abs(out[zero] - coeffs[zero])
        if drift > MASS_DRIFT_WARN * max(1.0, abs(coeffs[zero])):
            logger.warning(f"Transfer application drifted mass by {drift:.3e}")
        out[zero] = coeffs[zero]
        return out

    def apply(self, h):
        return Density(self.basis, self.apply_coeffs(h.coeffs))

    def mean_zero_operator(self, shift=None):
        """LinearOperator for 𝓛 (or z - 𝓛 when shift=z) on mean-zero coefficient vectors"""
        n = self.basis.size - 1

        def matvec(x):
            image = restrict(self.basis, self.apply_coeffs(extend(self.basis, np.ravel(x))))
            return image if shift is None else shift * np.ravel(x) - image

        return LinearOperator((n, n), matvec=matvec, dtype=complex)


def restrict(basis, coeffs):
    return np.delete(coeffs, basis.zero_index)


def extend(basis, reduced):
    return np.insert(np.asarray(reduced, dtype=complex), basis.zero_index, 0.0)


def transfer_apply(op, h):
    return op.apply(h)


def srb_density(op, tol=1e-12, max_iter=200, start=None, cutoff_tol=1e-8):
    """Invariant density of the frozen map by power iteration from the constant density"""
    h = start.normalized() if start is not None else Density.constant(op.basis)
    for iteration in range(1, max_iter + 1):
        image = op.apply(h)
        change = (image - h).norm()
        h = image
        if change <= tol * h.norm():
            logger.debug(f"SRB density converged after {iteration} applications (change {change:.2e})")
            break
    else:
        raise NoConvergence(
            f"power iteration did not converge in {max_iter} applications",
            residual=change,
            iterations=max_iter,
        )
    tail = h.mean_zero().tail_fraction() * (h.mean_zero().norm() / h.norm()) ** 2
    if tail > cutoff_tol:
        raise CutoffTooSmall(
            f"SRB density keeps {tail:.2e} of its energy near the cutoff K={op.basis.K}",
            K=op.basis.K,
            tail=tail,
        )
    return h


def resolvent_solve(op, z, v, tol=1e-12, maxiter=50, stall_factor=100.0):
    """w with (z - 𝓛)w = v on the mean-zero subspace, by restarted GMRES"""
    basis = op.basis
    rhs = restrict(basis, v.coeffs)
    scale = np.linalg.norm(rhs)
    if scale == 0.0:
        return Density.zeros(basis)

    system = op.mean_zero_operator(shift=z)
    restart = min(basis.size - 1, 200)
    solution, info = gmres(system, rhs, x0=rhs / z, rtol=tol, atol=0.0, restart=restart, maxiter=maxiter)
    residual = np.linalg.norm(system.matvec(solution) - rhs) / scale
    if residual > stall_factor * tol:
        raise SolverStall(
            f"resolvent solve at z={complex(z):.6g} stalled (info={info})",
            residual=residual,
            z=complex(z),
        )
    return Density(basis, extend(basis, solution))


def divergence_coupling(op, h):
    """div(𝓛 β h) = (β·∇)(𝓛h), mean-zero by construction"""
    return directional_derivative(op.apply(h), op.model.beta)


def spectral_gap_estimate(op, iterations=60, seed=0, floor=1e-14):
    """Empirical modulus of the leading mean-zero eigenvalue by power iteration"""
    basis = op.basis
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(basis.size) + 1j * rng.standard_normal(basis.size)
    start[basis.zero_index] = 0.0
    vector = start / np.linalg.norm(start)

    rates = []
    for _ in range(iterations):
        image = op.apply_coeffs(vector)
        image[basis.zero_index] = 0.0
        rate = np.linalg.norm(image)
        if rate < floor:
            return float(rate)
        rates.append(rate)
        vector = image / rate
    tail = np.log(rates[-min(10, len(rates)):])
    return float(np.exp(tail.mean()))


def dense_matrix(op, limit=4096):
    """Assemble 𝓛 column by column (oracle for small cutoffs only)"""
    size = op.basis.size
    if size > limit:
        raise ValueError(f"refusing to assemble a {size}x{size} dense transfer matrix")
    columns = np.eye(size, dtype=complex)
    return np.column_stack([op.apply_coeffs(columns[:, j]) for j in range(size)])


class KrylovResolvent:
    """Arnoldi reduction of 𝓛 on the Krylov space of a mean-zero vector v

    When the space becomes invariant, (z - 𝓛)⁻¹v = Q (z - H)⁻¹ e₁‖v‖ holds
    exactly, so resolvents along a whole contour cost one small solve each.
    """

    def __init__(self, op, v, max_dim=120, tol=1e-12):
        basis = op.basis
        operator = op.mean_zero_operator()
        start = restrict(basis, v.coeffs)
        self.basis = basis
        self.norm = float(np.linalg.norm(start))
        n = len(start)
        m_max = min(max_dim, n)
        Q = np.zeros((n, m_max + 1), dtype=complex)
        H = np.zeros((m_max + 1, m_max), dtype=complex)
        self.invariant = self.norm == 0.0
        dim = 0
        if not self.invariant:
            Q[:, 0] = start / self.norm
            for j in range(m_max):
                w = operator.matvec(Q[:, j])
                for _ in range(2):
                    projection = Q[:, : j + 1].conj().T @ w
                    w = w - Q[:, : j + 1] @ projection
                    H[: j + 1, j] += projection
                length = np.linalg.norm(w)
                dim = j + 1
                if length <= tol * max(1.0, np.linalg.norm(H[: j + 1, j])) or dim == n:
                    self.invariant = True
                    break
                H[j + 1, j] = length
                Q[:, j + 1] = w / length
        self.dim = dim
        self.Q = Q[:, :dim]
        self.H = H[:dim, :dim]

    def ritz_values(self):
        return np.linalg.eigvals(self.H) if self.dim else np.array([], dtype=complex)

    def solve(self, z, power=1):
        """(z - 𝓛)^{-power} v as a Density, or None when the reduction is not exact"""
        if not self.invariant:
            return None
        if self.dim == 0:
            return Density.zeros(self.basis)
        y = np.zeros(self.dim, dtype=complex)
        y[0] = self.norm
        shifted = z * np.eye(self.dim) - self.H
        for _ in range(power):
            y = np.linalg.solve(shifted, y)
        return Density(self.basis, extend(self.basis, self.Q @ y))

    def functional(self, row, z, power=1):
        """row·(z - 𝓛)^{-power} v without forming the full vector"""
        if not self.invariant:
            return None
        if self.dim == 0:
            return 0.0j
        projected = restrict(self.basis, row) @ self.Q
        y = np.zeros(self.dim, dtype=complex)
        y[0] = self.norm
        shifted = z * np.eye(self.dim) - self.H
        for _ in range(power):
            y = np.linalg.solve(shifted, y)
        return complex(projected @ y)


def krylov_resolvent(op, v, max_dim=120, tol=1e-12):
    return KrylovResolvent(op, v, max_dim=max_dim, tol=tol)
