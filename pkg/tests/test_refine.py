"""Refinement stage: MUSIC angles and exhaustive least-squares grid fits.

The grid fits are validated against a brute-force oracle that reconstructs
the rank-1 source model directly and enumerates the full combination grid --
the factorized quadratic form inside refine_ranges/refine_velocities must
agree with that direct evaluation combination by combination.
"""

import dataclasses
import math

import numpy as np
import pytest

from conftest import qpsk_frame
from tmadfrc import (
    Scene,
    Target,
    design_pattern,
    estimate_targets,
    radar_returns,
    scramble_symbols,
)
from tmadfrc.model import derived_resolutions
from tmadfrc.refine import (
    RefineOptions,
    SubspaceError,
    candidate_range_grid,
    candidate_velocity_grid,
    estimate_n_sources,
    matched_velocity_bins,
    music_angles,
    music_pseudospectrum,
    music_search_grid,
    refine_ranges,
    refine_velocities,
    sample_covariance,
    steering_vector,
)

ON_GRID_SIN = 0.25
ON_GRID_ANGLE = math.degrees(math.asin(ON_GRID_SIN))


def pattern_for(cfg):
    return design_pattern(cfg, cfg.cu_angle_deg)


# ---------------------------------------------------------------------------
# subspace pieces


def test_steering_vector_phase_law(ref_cfg):
    sv = steering_vector(ref_cfg, 20.0)
    assert sv.shape == (ref_cfg.num_rx_antennas,)
    assert sv[0] == 1.0 + 0.0j
    m = np.arange(ref_cfg.num_rx_antennas)
    expected = np.exp(-2j * np.pi * m * 0.5 * np.sin(np.radians(20.0)))
    np.testing.assert_allclose(sv, expected, rtol=1e-12)
    stacked = steering_vector(ref_cfg, [20.0, -30.0])
    assert stacked.shape == (2, ref_cfg.num_rx_antennas)
    np.testing.assert_allclose(stacked[0], sv, rtol=1e-12)


def test_sample_covariance_matches_manual_average():
    rng = np.random.default_rng(0)
    grid = rng.standard_normal((3, 2, 2)) + 1j * rng.standard_normal((3, 2, 2))
    flat = grid.reshape(3, -1)
    manual = sum(np.outer(flat[:, k], flat[:, k].conj()) for k in range(4)) / 4
    np.testing.assert_allclose(sample_covariance(grid), manual, rtol=1e-12)
    # symbol restriction keeps only that snapshot column
    only1 = grid[:, :, 1]
    manual1 = sum(np.outer(only1[:, k], only1[:, k].conj()) for k in range(2)) / 2
    np.testing.assert_allclose(sample_covariance(grid, symbol=1), manual1, rtol=1e-12)


def test_estimate_n_sources_picks_largest_gap():
    assert estimate_n_sources([10.0, 9.0, 8.0, 1.0, 1.0]) == 3
    assert estimate_n_sources([50.0, 1.0, 1.0]) == 1


def test_estimate_n_sources_respects_max_sources_cap():
    with pytest.raises(SubspaceError, match="gap"):
        estimate_n_sources([10.0, 9.0, 8.0, 1.0, 1.0], max_sources=1)


def test_estimate_n_sources_rejects_flat_spectrum():
    with pytest.raises(SubspaceError, match="gap"):
        estimate_n_sources([1.0, 1.0, 1.0])


def test_estimate_n_sources_rejects_degenerate_spectrum():
    with pytest.raises(SubspaceError, match="degenerate"):
        estimate_n_sources([0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# MUSIC


def test_music_search_grid_is_step_lattice_covering_bin(ref_cfg):
    grid = music_search_grid(20, ref_cfg, step_deg=0.1)
    # every point is a multiple of the step
    np.testing.assert_allclose(grid, np.round(grid / 0.1) * 0.1, atol=1e-9)
    center = 1.0 / 3.0  # sine of bin 20
    width = 1.0 / (ref_cfg.num_rx_antennas * 0.5)
    lo = math.degrees(math.asin(center - width))
    hi = math.degrees(math.asin(center + width))
    assert grid[0] >= lo - 1e-9 and grid[0] - 0.1 < lo
    assert grid[-1] <= hi + 1e-9 and grid[-1] + 0.1 > hi
    assert 20.0 == pytest.approx(grid[np.argmin(np.abs(grid - 20.0))], abs=1e-9)


def test_music_search_grid_clips_at_endfire(ref_cfg):
    # bin 12 sits at sin(theta) = 1: the window is clipped to +/-90 degrees
    grid = music_search_grid(12, ref_cfg)
    assert np.all(np.isfinite(grid))
    assert grid[-1] == pytest.approx(90.0, abs=1e-9)


def analytic_covariance(cfg, angles_deg, noise_power):
    steer = steering_vector(cfg, angles_deg)
    cov = noise_power * np.eye(cfg.num_rx_antennas, dtype=complex)
    for row in steer:
        cov += np.outer(row, row.conj())
    return cov


def test_music_angles_exact_on_analytic_covariance(ref_cfg):
    cov = analytic_covariance(ref_cfg, [20.0, 22.0], noise_power=0.01)
    grid = music_search_grid(20, ref_cfg, step_deg=0.1)
    angles = music_angles(cov, 2, ref_cfg, grid)
    assert angles.shape == (2,)
    assert angles[0] == pytest.approx(20.0, abs=1e-6)
    assert angles[1] == pytest.approx(22.0, abs=1e-6)


def test_music_pseudospectrum_scale_invariant(ref_cfg):
    cov = analytic_covariance(ref_cfg, [20.0, 22.0], noise_power=0.01)
    grid = music_search_grid(20, ref_cfg)
    base = music_pseudospectrum(cov, 2, ref_cfg, grid)
    scaled = music_pseudospectrum(7.3 * cov, 2, ref_cfg, grid)
    assert int(np.argmax(base)) == int(np.argmax(scaled))
    # compare the noise-subspace projections: the reciprocal peaks themselves
    # are 1/eps-sized and numerically irreproducible at the exact angles
    np.testing.assert_allclose(1.0 / scaled, 1.0 / base, rtol=1e-6, atol=1e-12)


def test_music_pseudospectrum_needs_noise_subspace(ref_cfg):
    cov = analytic_covariance(ref_cfg, [20.0], noise_power=0.01)
    with pytest.raises(SubspaceError, match="noise subspace"):
        music_pseudospectrum(cov, ref_cfg.num_rx_antennas, ref_cfg, np.array([0.0]))


def test_music_pseudospectrum_rejects_wrong_shape(ref_cfg):
    with pytest.raises(ValueError, match="covariance"):
        music_pseudospectrum(np.eye(3), 1, ref_cfg, np.array([0.0]))


def test_music_pseudospectrum_rejects_non_finite(ref_cfg):
    n = ref_cfg.num_rx_antennas
    cov = np.full((n, n), np.nan, dtype=complex)
    with pytest.raises(SubspaceError, match="finite"):
        music_pseudospectrum(cov, 1, ref_cfg, np.array([0.0]))


def test_music_angles_more_peaks_than_grid_points(ref_cfg):
    cov = analytic_covariance(ref_cfg, [20.0], noise_power=0.01)
    with pytest.raises(SubspaceError, match="peaks"):
        music_angles(cov, 3, ref_cfg, np.array([19.9, 20.1]))


# ---------------------------------------------------------------------------
# candidate grids


def test_candidate_range_grid_window(small_cfg):
    res, _, _ = derived_resolutions(small_cfg)
    grid = candidate_range_grid([2], small_cfg, points=5)
    np.testing.assert_allclose(
        grid, 2 * res + res * np.array([-0.5, -0.25, 0.0, 0.25, 0.5]), rtol=1e-12
    )


def test_candidate_range_grid_drops_negative_ranges(small_cfg):
    res, _, _ = derived_resolutions(small_cfg)
    grid = candidate_range_grid([0], small_cfg, points=5)
    np.testing.assert_allclose(grid, res * np.array([0.0, 0.25, 0.5]), atol=1e-12)


def test_candidate_range_grid_merges_touching_windows(small_cfg):
    # windows of adjacent bins share one endpoint; the union drops duplicates
    grid = candidate_range_grid([2, 3], small_cfg, points=5)
    assert grid.size == 9
    assert np.all(np.diff(grid) > 0)


def test_candidate_velocity_grid_keeps_negative_values(small_cfg):
    _, res, _ = derived_resolutions(small_cfg)
    grid = candidate_velocity_grid([-1, 1], small_cfg, points=3)
    np.testing.assert_allclose(
        grid, res * np.array([-1.5, -1.0, -0.5, 0.5, 1.0, 1.5]), rtol=1e-12
    )


# ---------------------------------------------------------------------------
# least-squares fits


def single_target_frame(cfg, target, seed):
    pattern = pattern_for(cfg)
    data = qpsk_frame(cfg, seed=seed)
    grid = radar_returns(data, pattern, cfg, Scene((target,), snr_db=np.inf))
    return pattern, data, grid


def test_refine_ranges_zero_residual_on_candidate_lattice(small_cfg):
    res, _, _ = derived_resolutions(small_cfg)
    step = res / 100  # default 101-point window
    truth = 2 * res + 10 * step  # on the candidate lattice, off the bin center
    target = Target(ON_GRID_ANGLE, truth, 40.0, reflectivity=1.0)
    pattern, data, grid = single_target_frame(small_cfg, target, seed=11)
    fit = refine_ranges(grid, data, pattern, small_cfg, [ON_GRID_ANGLE], [2])
    energy = float(np.sum(np.abs(grid[:, :, 0]) ** 2))
    assert fit.values[0] == pytest.approx(truth, abs=1e-9)
    assert fit.residual == pytest.approx(0.0, abs=1e-9 * energy)
    # pinning the source to the coarse center must fit strictly worse
    assert fit.coarse_values[0] == pytest.approx(2 * res, abs=1e-9)
    assert fit.coarse_residual > fit.residual
    assert not any(fit.on_boundary)


def test_refine_ranges_fitted_gain_recovers_reflectivity(small_cfg):
    res, _, _ = derived_resolutions(small_cfg)
    beta = 0.8 + 0.1j
    target = Target(ON_GRID_ANGLE, 2 * res, -75.0, reflectivity=beta)
    pattern, data, grid = single_target_frame(small_cfg, target, seed=12)
    fit = refine_ranges(
        grid, data, pattern, small_cfg, [ON_GRID_ANGLE], [2],
        options=RefineOptions(fit_gains=True),
    )
    assert fit.gains is not None
    assert fit.gains[0] == pytest.approx(beta, abs=1e-9)


def test_refine_ranges_matches_enumeration_oracle(small_cfg):
    """Two sources, 11x11 combination grid: the factorized search must pick
    the same combination as direct reconstruction of every candidate pair."""
    res, _, _ = derived_resolutions(small_cfg)
    angles = [math.degrees(math.asin(-0.5)), ON_GRID_ANGLE]  # bins 2 and 7
    truths = [2.33 * res, 4.77 * res]
    targets = (
        Target(angles[0], truths[0], 40.0, reflectivity=1.0),
        Target(angles[1], truths[1], -90.0, reflectivity=1.0),
    )
    pattern = pattern_for(small_cfg)
    data = qpsk_frame(small_cfg, seed=13)
    grid = radar_returns(data, pattern, small_cfg, Scene(targets, snr_db=np.inf))
    options = RefineOptions(range_points=11)
    fit = refine_ranges(grid, data, pattern, small_cfg, angles, [2, 5], options=options)

    candidates = candidate_range_grid([2, 5], small_cfg, points=11)
    np.testing.assert_allclose(fit.grids[0], candidates, rtol=1e-12)
    snapshot = grid[:, :, 0]
    s = np.arange(small_cfg.num_subcarriers)
    steer = steering_vector(small_cfg, angles)
    scrambled = [
        scramble_symbols(data[:, 0], pattern, small_cfg, angle) for angle in angles
    ]

    def ramp(r):
        return np.exp(
            -2j * np.pi * s * small_cfg.subcarrier_spacing_hz * 2.0 * r / small_cfg.c
        )

    best = (np.inf, None)
    for i, r0 in enumerate(candidates):
        atom0 = steer[0][:, None] * (scrambled[0] * ramp(r0))[None, :]
        for j, r1 in enumerate(candidates):
            recon = atom0 + steer[1][:, None] * (scrambled[1] * ramp(r1))[None, :]
            residual = float(np.sum(np.abs(snapshot - recon) ** 2))
            if residual < best[0]:
                best = (residual, (i, j))
    i, j = best[1]
    assert fit.values[0] == pytest.approx(candidates[i], abs=1e-12)
    assert fit.values[1] == pytest.approx(candidates[j], abs=1e-12)
    assert fit.residual == pytest.approx(best[0], rel=1e-8)


def test_refine_velocities_matches_enumeration_oracle(small_cfg):
    cfg = dataclasses.replace(small_cfg, narrowband_doppler=True)
    res, vres, _ = derived_resolutions(cfg)
    angles = [math.degrees(math.asin(-0.5)), ON_GRID_ANGLE]
    ranges = [2.33 * res, 4.77 * res]
    velocities = [2.17 * vres, -3.38 * vres]
    targets = (
        Target(angles[0], ranges[0], velocities[0], reflectivity=1.0),
        Target(angles[1], ranges[1], velocities[1], reflectivity=1.0),
    )
    pattern = pattern_for(cfg)
    data = qpsk_frame(cfg, seed=14)
    grid = radar_returns(data, pattern, cfg, Scene(targets, snr_db=np.inf))
    fit = refine_velocities(grid, data, pattern, cfg, angles, ranges, [2, -3])

    candidates = candidate_velocity_grid([2, -3], cfg, points=11)
    s = np.arange(cfg.num_subcarriers)
    mu = np.arange(cfg.num_ofdm_symbols)
    steer = steering_vector(cfg, angles)
    base = []
    for angle, r in zip(angles, ranges):
        scrambled = scramble_symbols(data, pattern, cfg, angle)
        ramp = np.exp(-2j * np.pi * s * cfg.subcarrier_spacing_hz * 2.0 * r / cfg.c)
        base.append(scrambled * ramp[:, None])

    def recon_one(q, v):
        slow = np.exp(
            2j * np.pi * cfg.symbol_duration_s * mu * 2.0 * v * cfg.carrier_freq_hz / cfg.c
        )
        return steer[q][:, None, None] * (base[q] * slow[None, :])[None, :, :]

    best = (np.inf, None)
    for i, v0 in enumerate(candidates):
        part = recon_one(0, v0)
        for j, v1 in enumerate(candidates):
            residual = float(np.sum(np.abs(grid - part - recon_one(1, v1)) ** 2))
            if residual < best[0]:
                best = (residual, (i, j))
    i, j = best[1]
    assert fit.values[0] == pytest.approx(candidates[i], abs=1e-12)
    assert fit.values[1] == pytest.approx(candidates[j], abs=1e-12)
    assert fit.residual == pytest.approx(best[0], rel=1e-8)


def test_refine_ranges_warns_when_optimum_hits_window_edge(small_cfg):
    res, _, _ = derived_resolutions(small_cfg)
    target = Target(ON_GRID_ANGLE, 2 * res, 40.0, reflectivity=1.0)
    pattern, data, grid = single_target_frame(small_cfg, target, seed=15)
    # claim the target sits in bin 1: its window tops out at 1.5 cells
    with pytest.warns(RuntimeWarning, match="range hit the edge"):
        fit = refine_ranges(grid, data, pattern, small_cfg, [ON_GRID_ANGLE], [1])
    assert any(fit.on_boundary)
    assert fit.values[0] == pytest.approx(1.5 * res, abs=1e-9)


def test_refine_velocities_warns_when_optimum_hits_window_edge(small_cfg):
    cfg = dataclasses.replace(small_cfg, narrowband_doppler=True)
    res, vres, _ = derived_resolutions(cfg)
    # just past the window edge: the closest in-window candidate is the edge
    target = Target(ON_GRID_ANGLE, 2 * res, 0.55 * vres, reflectivity=1.0)
    pattern, data, grid = single_target_frame(cfg, target, seed=16)
    with pytest.warns(RuntimeWarning, match="velocity hit the edge"):
        fit = refine_velocities(
            grid, data, pattern, cfg, [ON_GRID_ANGLE], [2 * res], [0]
        )
    assert any(fit.on_boundary)
    assert fit.values[0] == pytest.approx(0.5 * vres, abs=1e-9)


def test_refine_velocities_needs_one_range_per_angle(small_cfg):
    pattern = pattern_for(small_cfg)
    data = qpsk_frame(small_cfg, seed=17)
    grid = np.zeros(small_cfg.returns_shape, dtype=complex)
    with pytest.raises(ValueError, match="one refined range per angle"):
        refine_velocities(grid, data, pattern, small_cfg, [0.0, 10.0], [100.0], [0])


def test_combination_budget_is_enforced(small_cfg):
    pattern = pattern_for(small_cfg)
    data = qpsk_frame(small_cfg, seed=18)
    grid = np.ones(small_cfg.returns_shape, dtype=complex)
    options = RefineOptions(range_points=11, max_combinations=10)
    with pytest.raises(ValueError, match="exceed"):
        refine_ranges(grid, data, pattern, small_cfg, [0.0, 10.0], [2, 5], options=options)


def test_matched_velocity_bins_recovers_true_bin(small_cfg):
    cfg = dataclasses.replace(small_cfg, narrowband_doppler=True)
    res, vres, _ = derived_resolutions(cfg)
    target = Target(ON_GRID_ANGLE, 2 * res, 3 * vres, reflectivity=1.0)
    pattern, data, grid = single_target_frame(cfg, target, seed=19)
    rows = np.einsum(
        "m,msp->sp", np.exp(2j * np.pi * np.arange(cfg.num_rx_antennas) * 0.5 * ON_GRID_SIN), grid
    )
    bins = matched_velocity_bins(
        rows, data, pattern, cfg, ON_GRID_ANGLE, target.range_m, count=1
    )
    assert bins == [3]


# ---------------------------------------------------------------------------
# end-to-end estimation


def test_estimate_targets_reference_frame(ref_cfg, ref_pattern, ref_frame):
    """The packaged scene refines to its true parameters within one grid step
    on every axis.  The 20 m/s target's best velocity sits exactly on its
    search-window edge, which the fit flags with a warning."""
    data, received = ref_frame
    with pytest.warns(RuntimeWarning, match="velocity hit the edge"):
        estimates = estimate_targets(received, data, ref_pattern, ref_cfg)
    assert len(estimates.refined) == 3
    _, vres, _ = derived_resolutions(ref_cfg)
    truth = {
        20.0: (50.0, -10.0),
        22.0: (60.0, 10.0),
        -30.0: (120.0, 20.0),
    }
    matched = set()
    for row in estimates.refined:
        angle = min(truth, key=lambda a: abs(a - row.angle_deg))
        assert abs(row.angle_deg - angle) <= 0.1 + 1e-9
        expected_range, expected_velocity = truth[angle]
        assert abs(row.range_m - expected_range) <= 0.2
        assert abs(row.velocity_mps - expected_velocity) <= vres / 10 + 1e-9
        matched.add(angle)
    assert matched == set(truth)


def test_estimate_targets_empty_frame_returns_empty_set(small_cfg):
    pattern = pattern_for(small_cfg)
    data = qpsk_frame(small_cfg, seed=20)
    grid = radar_returns(data, pattern, small_cfg, Scene((), seed=4, snr_db=10.0))
    estimates = estimate_targets(grid, data, pattern, small_cfg)
    assert estimates.coarse == [] and estimates.refined == []


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # forcing one source per
# bin mis-models the shared bin, so the fits legitimately hit window edges
def test_estimate_targets_num_sources_override(ref_cfg, ref_pattern, ref_frame):
    data, received = ref_frame
    options = RefineOptions(num_sources=1)
    estimates = estimate_targets(received, data, ref_pattern, ref_cfg, options=options)
    # one source per occupied angle bin instead of two in the shared bin
    assert len(estimates.refined) == 2
    assert sorted({row.angle_bin for row in estimates.refined}) == [6, 20]


def test_estimate_targets_single_symbol_covariance(small_cfg):
    cfg = dataclasses.replace(small_cfg, narrowband_doppler=True)
    res, vres, _ = derived_resolutions(cfg)
    # sines 0.75 and 0.25 sit symmetric about the 30-degree steer, where the
    # scrambled signal power is equal, so neither return shadows the other
    # at the angle detection stage
    targets = (
        Target(math.degrees(math.asin(0.75)), 2.2 * res, 1.3 * vres, reflectivity=1.0),
        Target(ON_GRID_ANGLE, 4.6 * res, -2.6 * vres, reflectivity=1.0),
    )
    pattern = pattern_for(cfg)
    data = qpsk_frame(cfg, seed=21)
    grid = radar_returns(data, pattern, cfg, Scene(targets, snr_db=np.inf))
    estimates = estimate_targets(
        grid, data, pattern, cfg, options=RefineOptions(covariance_symbol=0)
    )
    assert len(estimates.refined) == 2
    found = sorted(row.angle_deg for row in estimates.refined)
    expected = sorted(t.angle_deg for t in targets)
    assert found[0] == pytest.approx(expected[0], abs=0.06)
    assert found[1] == pytest.approx(expected[1], abs=0.06)
