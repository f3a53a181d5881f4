import numpy as np
import pytest

from database import load_run_config
from errors import NegativeMass
from main import classified_roots
from meanfield import frozen_srb
from model import TWO_PI
from particle import (
    ParticleSettings,
    detect_residences,
    init_ensemble,
    mean_field,
    particle_uniforms,
    residence_thresholds,
    run,
    running_mean,
    sample_density,
    step,
    tree_sum,
)
from transfer import Density


@pytest.fixture(scope="module")
def ensemble(system_2d):
    return init_ensemble(Density.constant(system_2d.basis), 300, seed=11)


def test_uniforms_are_indexed_by_particle():
    serial = particle_uniforms(5, 0, 40, 2)
    assert np.array_equal(serial[17:], particle_uniforms(5, 17, 40, 2))
    assert serial.min() >= 0.0
    assert serial.max() < 1.0


def test_sampling_is_deterministic_and_chunk_independent(system_2d, ensemble):
    density = Density.constant(system_2d.basis)
    again = init_ensemble(density, 300, seed=11)
    chunked = init_ensemble(density, 300, seed=11, chunk=7)
    assert np.array_equal(ensemble.positions, again.positions)
    assert np.array_equal(ensemble.positions, chunked.positions)
    assert ensemble.positions.min() >= 0.0
    assert ensemble.positions.max() < TWO_PI


def test_negative_densities_are_rejected(system_2d):
    basis = system_2d.basis
    signed = Density.constant(basis) + Density.mode(basis, (0, 1), 2.0 / TWO_PI**2)
    with pytest.raises(NegativeMass):
        sample_density(signed, particle_uniforms(0, 0, 10, 2))


def test_tree_sum_ignores_order():
    values = np.random.default_rng(0).standard_normal(5000)
    assert tree_sum(values) == tree_sum(values[::-1])
    assert tree_sum(values) == pytest.approx(np.sum(values))


def test_step_is_permutation_equivariant(model_2d, ensemble):
    order = np.random.default_rng(1).permutation(ensemble.N)
    lhs = step(ensemble.permuted(order), model_2d, 5.0).positions
    rhs = step(ensemble, model_2d, 5.0).positions[order]
    assert np.array_equal(lhs, rhs)


def test_threaded_step_matches_serial(model_2d, ensemble):
    serial = step(ensemble, model_2d, 5.0)
    threaded = step(ensemble, model_2d, 5.0, workers=3, chunk=64)
    assert np.array_equal(serial.positions, threaded.positions)


def test_uncoupled_particles_evolve_independently(model_2d, ensemble):
    half = ensemble.N // 2
    whole = ensemble
    left = ensemble.permuted(np.arange(half))
    right = ensemble.permuted(np.arange(half, ensemble.N))
    for _ in range(10):
        whole, left, right = (step(e, model_2d, 0.0) for e in (whole, left, right))
    assert np.array_equal(whole.positions, np.concatenate([left.positions, right.positions]))
    assert whole.n == 10
    assert 0.0 <= whole.omega <= 2.0


def test_mean_field_range(model_2d, ensemble):
    assert 0.0 <= mean_field(ensemble.positions, model_2d) <= 2.0


def test_residence_thresholds(model_2d):
    assert residence_thresholds(model_2d, [1.0]) == pytest.approx((0.25, 0.35))
    assert residence_thresholds(model_2d, [1.0, 1.1]) == pytest.approx((0.045, 0.05))


def test_residences_and_switches():
    trajectory = np.concatenate([np.full(150, 1.0), np.full(150, 1.2), np.full(30, 1.1)])
    residences, switches = detect_residences(trajectory, [1.0, 1.2], enter=0.05, leave=0.09, min_dwell=100)
    assert [(r.start, r.end, r.matched_branch_omega) for r in residences] == [(0, 149, 1.0), (150, 299, 1.2)]
    assert switches == 1
    assert residences[1].plateau_mean == pytest.approx(1.2)


def test_short_visits_are_not_residences():
    trajectory = np.concatenate([np.full(50, 1.0), np.full(50, 1.5)])
    assert detect_residences(trajectory, [1.0], enter=0.05, leave=0.09, min_dwell=100) == ([], 0)


def test_run_is_reproducible(model_2d, ensemble):
    settings = ParticleSettings(min_dwell=5)
    first = run(ensemble, model_2d, 5.0, 25, [1.0], settings)
    second = run(ensemble, model_2d, 5.0, 25, [1.0], settings)
    assert np.array_equal(first.trajectory, second.trajectory)
    assert first.ensemble.n == 25
    assert len(first.to_frame()) == 25
    assert first.summary()["steps"] == 25


def test_running_mean_uses_partial_windows():
    np.testing.assert_allclose(running_mean([1.0, 3.0, 5.0, 7.0], 2), [1.0, 2.0, 4.0, 6.0])
    assert np.array_equal(running_mean([1.0, 2.0], 1), [1.0, 2.0])


def test_smoothing_recovers_switches_under_small_ensemble_noise():
    rng = np.random.default_rng(3)
    plateaus = np.repeat([0.977, 1.024, 0.977], 2000)
    trajectory = plateaus + 0.07 * rng.standard_normal(len(plateaus))
    enter, leave = 0.45 * 0.047, 0.5 * 0.047
    assert detect_residences(trajectory, [0.977, 1.024], enter, leave, min_dwell=100) == ([], 0)
    residences, switches = detect_residences(trajectory, [0.977, 1.024], enter, leave, min_dwell=100, window=100)
    assert switches == 2
    visited = [r.matched_branch_omega for r in residences]
    assert [w for i, w in enumerate(visited) if i == 0 or w != visited[i - 1]] == [0.977, 1.024, 0.977]
    assert all(r.plateau_mean == pytest.approx(1.024, abs=0.01) for r in residences if r.matched_branch_omega == 1.024)


@pytest.fixture(scope="module")
def bistable(system_2d):
    entries = classified_roots(system_2d, 80.0, load_run_config())
    stable = [record.omega for record, report in entries if report.classification == "physical"]
    return system_2d, stable


@pytest.mark.slow
def test_large_ensembles_stay_in_their_basins(bistable):
    system, stable = bistable
    model = system.model
    assert len(stable) == 2
    settings = ParticleSettings(workers=4, chunk=25_000)
    for offset, omega in enumerate(stable):
        ensemble = init_ensemble(frozen_srb(system, 80.0, omega), 100_000, seed=offset)
        result = run(ensemble, model, 80.0, 10_000, stable, settings)
        assert np.max(np.abs(result.trajectory - omega)) <= 5 * model.mu
        assert result.switches == 0
        assert [r.matched_branch_omega for r in result.residences] == [omega]


@pytest.mark.slow
def test_small_ensemble_fluctuations_are_smoothed(bistable):
    system, stable = bistable
    ensemble = init_ensemble(frozen_srb(system, 80.0, stable[0]), 100, seed=0)
    result = run(ensemble, system.model, 80.0, 20_000, stable)
    smoothed = running_mean(result.trajectory, result.thresholds["smooth_window"])
    assert np.std(smoothed[100:]) < 0.5 * np.std(result.trajectory)
    assert result.summary()["switches"] == result.switches
