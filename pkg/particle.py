"""Finite-N coupled system (T_N(x))_i = T(x_i) + (ν/N) Σ_j βα(x_j).

Initial positions are drawn from a Density with a counter-based generator
(numpy Philox): particle i always consumes counter block i, so chunked and
serial sampling agree bitwise. The mean field is summed in sorted order over
fixed 1024-blocks, which makes every step exactly permutation equivariant.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from errors import NegativeMass
from model import TWO_PI, alpha_values, apply_coupled_map, to_torus

logger = logging.getLogger(__name__)

BLOCK = 1024
CLIP_WARN = 1e-6
CLIP_FAIL = 1e-3


@dataclass(frozen=True)
class ParticleSettings:
    enter_factor: float = 5.0
    exit_factor: float = 7.0
    enter_cap: float = 0.45
    exit_cap: float = 0.5
    min_dwell: int = 100
    smooth_window: Optional[int] = None
    workers: int = 1
    chunk: int = 65536


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    positions: np.ndarray = field(repr=False)
    seed: int
    n: int = 0
    omega: float = float("nan")

    def __post_init__(self):
        if self.positions.ndim != 2 or len(self.positions) < 1:
            raise ValueError("an ensemble needs at least one particle")

    @property
    def N(self):
        return len(self.positions)

    def permuted(self, order):
        return ParticleEnsemble(self.positions[np.asarray(order)], self.seed, self.n, self.omega)


@dataclass(frozen=True)
class Residence:
    start: int
    end: int
    plateau_mean: float
    matched_branch_omega: float

    def to_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class RunResult:
    ensemble: ParticleEnsemble
    trajectory: np.ndarray = field(repr=False)
    residences: list
    switches: int
    thresholds: dict

    def plateau_means(self):
        means = {}
        for stable in sorted({r.matched_branch_omega for r in self.residences}):
            spans = [r for r in self.residences if r.matched_branch_omega == stable]
            weights = np.array([r.end - r.start + 1 for r in spans], dtype=float)
            means[stable] = float(np.average([r.plateau_mean for r in spans], weights=weights))
        return means

    def to_frame(self):
        return pd.DataFrame({"step": np.arange(len(self.trajectory)), "omega": self.trajectory})

    def summary(self):
        return {
            "N": self.ensemble.N,
            "steps": len(self.trajectory),
            "mean_omega": float(np.mean(self.trajectory)) if len(self.trajectory) else None,
            "switches": self.switches,
            "thresholds": self.thresholds,
            "residences": [r.to_dict() for r in self.residences],
            "plateau_means": {f"{k:.12g}": v for k, v in self.plateau_means().items()},
        }


def particle_uniforms(seed, start, stop, dim):
    """Uniforms in [0,1) for particles start..stop-1, one Philox counter block per particle"""
    bit_generator = np.random.Philox(np.random.SeedSequence(seed))
    bit_generator.advance(start)
    raw = bit_generator.random_raw(4 * (stop - start)).reshape(-1, 4)[:, :dim]
    return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _cell_masses(values):
    """Mass of each grid cell from the average of its corner samples"""
    masses = values
    for axis in range(values.ndim):
        masses = 0.5 * (masses + np.roll(masses, -1, axis=axis))
    return masses


def _invert_cdf(masses, u):
    """Cell index and linear position inside the cell for each uniform u"""
    cdf = np.cumsum(masses)
    target = u * cdf[-1]
    cell = np.minimum(np.searchsorted(cdf, target, side="right"), len(masses) - 1)
    below = np.concatenate([[0.0], cdf[:-1]])[cell]
    width = masses[cell]
    fraction = np.where(width > 0, (target - below) / np.where(width > 0, width, 1.0), 0.5)
    return cell, np.clip(fraction, 0.0, 1.0 - 2.0**-53)


def sample_density(density, uniforms):
    """Per-axis conditional inverse CDF on the collocation grid"""
    values = density.grid_view()
    negative = -np.sum(values[values < 0])
    positive = np.sum(values[values > 0])
    clipped = float(negative / positive) if positive > 0 else 1.0
    if clipped > CLIP_FAIL:
        raise NegativeMass(f"density has clipped negative mass {clipped:.2e}", clipped=clipped)
    if clipped > CLIP_WARN:
        logger.warning(f"Clipped negative density mass {clipped:.2e} before sampling")
    masses = _cell_masses(np.clip(values, 0.0, None))
    n = masses.shape[0]
    spacing = TWO_PI / n

    dim = density.basis.dim
    positions = np.empty((len(uniforms), dim))
    if dim == 1:
        cell, fraction = _invert_cdf(masses, uniforms[:, 0])
        positions[:, 0] = (cell + fraction) * spacing
        return to_torus(positions)

    first, first_fraction = _invert_cdf(masses.sum(axis=1), uniforms[:, 0])
    second = np.empty(len(uniforms), dtype=int)
    second_fraction = np.empty(len(uniforms))
    for row in np.unique(first):
        chosen = first == row
        second[chosen], second_fraction[chosen] = _invert_cdf(masses[row], uniforms[chosen, 1])
    positions[:, 0] = (first + first_fraction) * spacing
    positions[:, 1] = (second + second_fraction) * spacing
    return to_torus(positions)


def init_ensemble(density, N, seed, chunk=65536):
    if N < 1:
        raise ValueError("N must be at least 1")
    dim = density.basis.dim
    pieces = [
        sample_density(density, particle_uniforms(seed, start, min(start + chunk, N), dim))
        for start in range(0, N, chunk)
    ]
    logger.debug(f"Sampled {N} particles with seed {seed}")
    return ParticleEnsemble(np.concatenate(pieces), seed)


def tree_sum(values, block=BLOCK):
    """Sum of sorted values over fixed blocks, combined pairwise"""
    ordered = np.sort(values)
    partial = [float(np.sum(ordered[start:start + block])) for start in range(0, len(ordered), block)]
    while len(partial) > 1:
        paired = [partial[i] + partial[i + 1] for i in range(0, len(partial) - 1, 2)]
        if len(partial) % 2:
            paired.append(partial[-1])
        partial = paired
    return partial[0] if partial else 0.0


def mean_field(positions, model):
    """ω = (1/N) Σ α(x_j), always inside [0, 2]"""
    return tree_sum(alpha_values(model, positions)) / len(positions)


def _advance(model, nu, omega, positions, workers, chunk):
    if workers <= 1 or len(positions) <= chunk:
        return apply_coupled_map(model, nu, omega, positions)
    parts = [positions[start:start + chunk] for start in range(0, len(positions), chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(lambda part: apply_coupled_map(model, nu, omega, part), parts)))


def step(ensemble, model, nu, workers=1, chunk=65536):
    """One application of the coupled system; the returned ensemble carries the ω it was driven by"""
    omega = mean_field(ensemble.positions, model)
    positions = _advance(model, nu, omega, ensemble.positions, workers, chunk)
    return ParticleEnsemble(positions, ensemble.seed, ensemble.n + 1, omega)


def residence_thresholds(model, stable_omegas, settings=None):
    settings = settings or ParticleSettings()
    enter = settings.enter_factor * model.mu
    leave = settings.exit_factor * model.mu
    stable = sorted(stable_omegas)
    if len(stable) > 1:
        spacing = float(np.min(np.diff(stable)))
        enter = min(enter, settings.enter_cap * spacing)
        leave = min(leave, settings.exit_cap * spacing)
    return enter, leave


def running_mean(trajectory, window):
    """Trailing mean over the last `window` values (fewer at the start)"""
    trajectory = np.asarray(trajectory, dtype=float)
    if window <= 1:
        return trajectory
    totals = np.concatenate([[0.0], np.cumsum(trajectory)])
    ends = np.arange(1, len(trajectory) + 1)
    starts = np.maximum(ends - window, 0)
    return (totals[ends] - totals[starts]) / (ends - starts)


def detect_residences(trajectory, stable_omegas, enter, leave, min_dwell=100, window=1):
    """Residences near stable values with hysteresis; returns (residences, switches)

    The thresholds act on the trailing mean over `window` steps, so O(N^{-1/2})
    fluctuations of a small ensemble do not break up a plateau. Plateau means
    are taken over the raw trajectory.
    """
    stable = np.sort(np.asarray(stable_omegas, dtype=float))
    raw = np.asarray(trajectory, dtype=float)
    if not len(stable) or not len(raw):
        return [], 0
    smoothed = running_mean(raw, window)
    nearest = stable[np.argmin(np.abs(smoothed[:, None] - stable[None, :]), axis=1)]
    distance = np.abs(smoothed - nearest)

    residences = []
    current = None
    candidate_start = None
    for n in range(len(smoothed)):
        if current is not None:
            if abs(smoothed[n] - current) > leave:
                residences.append((start, n - 1, current))
                current = None
                candidate_start = None
            else:
                continue
        if distance[n] <= enter:
            if candidate_start is None or nearest[candidate_start] != nearest[n]:
                candidate_start = n
            if n - candidate_start + 1 >= min_dwell:
                current = nearest[n]
                start = candidate_start
        else:
            candidate_start = None
    if current is not None:
        residences.append((start, len(smoothed) - 1, current))

    records = [
        Residence(int(a), int(b), float(np.mean(raw[a:b + 1])), float(value))
        for a, b, value in residences
    ]
    switches = sum(1 for left, right in zip(records, records[1:]) if left.matched_branch_omega != right.matched_branch_omega)
    return records, switches


def run(ensemble, model, nu, steps, stable_omegas=(), settings=None):
    """Iterate `steps` times and segment the mean-field trajectory into residences"""
    settings = settings or ParticleSettings()
    positions = ensemble.positions
    trajectory = np.empty(steps)
    for n in range(steps):
        omega = mean_field(positions, model)
        trajectory[n] = omega
        positions = _advance(model, nu, omega, positions, settings.workers, settings.chunk)

    enter, leave = residence_thresholds(model, stable_omegas, settings)
    window = settings.smooth_window or settings.min_dwell
    residences, switches = detect_residences(trajectory, stable_omegas, enter, leave, settings.min_dwell, window)
    logger.info(
        f"Ran N={ensemble.N} for {steps} steps at nu={nu:g}: "
        f"{len(residences)} residence(s), {switches} switch(es)"
    )
    last = float(trajectory[-1]) if steps else ensemble.omega
    final = ParticleEnsemble(positions, ensemble.seed, ensemble.n + steps, last)
    thresholds = {"enter": enter, "exit": leave, "min_dwell": settings.min_dwell, "smooth_window": window}
    return RunResult(final, trajectory, residences, switches, thresholds)
