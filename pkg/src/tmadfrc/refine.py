"""Refinement of coarse detections: subspace angles, least-squares
ranges and velocities.

Angles first: within each detected beamforming bin a MUSIC pseudospectrum is
evaluated on a fine degree grid around the bin, using the receive sample
covariance.  Co-bin targets that the coarse DFT merged are separated here —
their slow-time Doppler rotation decorrelates them across OFDM symbols, so
averaging the covariance over the whole frame keeps the signal subspace well
conditioned even for closely spaced directions.  The noise projector is built
once per frame from the *global* signal-subspace dimension: when several bins
are occupied, sizing the subspace per bin would leave the other bins' signal
eigenvectors inside the noise subspace and bias the peaks by a few tenths of
a degree.

Ranges and velocities follow by exhaustive least squares on candidate grids.
The signal model for Q sources in one angle bin is

    D = sum_q g_q * atom_q(parameter_q) + noise,

and the search minimizes ||D - sum_q atom_q||^2 over the Q-fold grid product.
Expanding the norm turns the scan into table lookups: with
u_q[i] = <atom_q(i), D> and Gram blocks C_qp[i, j] = <atom_q(i), atom_p(j)>
the residual is ||D||^2 - 2 Re sum_q u_q[i_q] + sum_qp C_qp[i_q, i_p], so the
heavy inner products against the data are computed once per grid point rather
than once per combination.

Range atoms live on the antenna-by-subcarrier slice of OFDM symbol 0, where
the slow-time Doppler phase of every target is exactly 1 (at later symbols a
moving target's range ramp is displaced by its migration v * mu * T_p):

    atom_q(R)[m, s] = scrambled_q(s, 0) * a_m(theta_q) * exp(-2j pi s f_s 2R/c).

All sources of a bin share one range grid — the union of windows around the
bin's detected range peaks, half a resolution cell either side — because a
merged range peak says nothing about which source produced it; the joint fit
sorts that out.

Velocity atoms use the whole frame with the refined angles and ranges frozen
in, and the slow-time phase exp(+2j pi mu T_p 2 v f_c / c).  The candidate
bins pool the coarse velocity peaks with each source's matched-spectrum peaks
(see ``matched_velocity_bins``): the coarse spectra descramble at the
bin-center angle, which decoheres a target sitting toward the edge of the
bin, while the matched spectra restore it but cannot tell whose peak is
whose.  All sources therefore share the union of candidate windows and the
joint fit assigns them.

Every grid contains the value it was centered on, so refinement can never do
worse than the coarse stage on the same objective.
"""

import dataclasses
import itertools
import warnings

import numpy as np

from .coarse import (
    DetectionOptions,
    NoPeaksError,
    coarse_pipeline,
    descramble,
    range_response,
    velocity_spectrum,
)
from .model import (
    EstimateSet,
    RefinedEstimate,
    SystemConfig,
    check_antenna_grid,
    check_symbol_grid,
    derived_resolutions,
)
from .tma import SwitchingPattern, scramble_symbols
from .transforms import signed_bin_index, wrapped_bin_frequency


class SubspaceError(RuntimeError):
    """The covariance eigenstructure cannot support the requested split."""


@dataclasses.dataclass(frozen=True)
class RefineOptions:
    music_step_deg: float = 0.1
    num_sources: int | None = None  # per-bin peak count; default: count pseudospectrum peaks
    signal_dimension: int | None = None  # subspace size; default: eigenvalue-gap estimate
    peak_rel_threshold: float = 1e-2  # pseudospectrum maxima below this fraction don't count
    range_points: int = 101
    velocity_points: int = 11
    fit_gains: bool = False
    max_combinations: int = 1_000_000
    covariance_symbol: int | None = None  # None: average over the whole frame


def steering_vector(cfg: SystemConfig, theta_deg) -> np.ndarray:
    """Receive-array response, shape (num_rx_antennas,) or (..., num_rx_antennas)."""
    sin_theta = np.sin(np.radians(np.asarray(theta_deg, dtype=float)))
    m = np.arange(cfg.num_rx_antennas)
    return np.exp(-2j * np.pi * np.multiply.outer(sin_theta, m) * cfg.rx_spacing_wavelengths)


def sample_covariance(grid: np.ndarray, symbol: int | None = None) -> np.ndarray:
    """Spatial sample covariance with subcarriers (and optionally all OFDM
    symbols) as snapshots.

    Args:
        symbol: restrict snapshots to one OFDM symbol; None pools the frame.
    """
    grid = np.asarray(grid, dtype=np.complex128)
    snapshots = grid if symbol is None else grid[:, :, [symbol]]
    flat = snapshots.reshape(snapshots.shape[0], -1)
    return flat @ flat.conj().T / flat.shape[1]


def estimate_n_sources(eigenvalues, max_sources: int | None = None, min_ratio: float = 3.0) -> int:
    """Source count from the largest consecutive-eigenvalue ratio.

    Raises:
        SubspaceError: eigenvalues are degenerate or show no gap of at least
            ``min_ratio``.
    """
    lam = np.sort(np.abs(np.asarray(eigenvalues, dtype=float)))[::-1]
    if lam.size < 2 or not np.all(np.isfinite(lam)) or lam[0] <= 0.0:
        raise SubspaceError("eigenvalue spectrum is degenerate")
    upper = lam.size - 1 if max_sources is None else min(int(max_sources), lam.size - 1)
    if upper < 1:
        raise SubspaceError("need room for at least one source and one noise eigenvalue")
    ratios = lam[:upper] / np.maximum(lam[1 : upper + 1], lam[0] * 1e-15)
    best = int(np.argmax(ratios))
    if ratios[best] < min_ratio:
        raise SubspaceError(
            f"largest eigenvalue gap {ratios[best]:.2f} is below {min_ratio:.2f}; "
            f"cannot separate signal from noise"
        )
    return best + 1


def music_search_grid(angle_bin: int, cfg: SystemConfig, step_deg: float = 0.1) -> np.ndarray:
    """Degree grid around a beamforming bin: all multiples of ``step_deg``
    within one coarse bin width either side of the bin center (sine domain)."""
    spacing = cfg.rx_spacing_wavelengths
    center = -float(wrapped_bin_frequency(np.asarray(angle_bin), cfg.num_rx_antennas)) / spacing
    width = 1.0 / (cfg.num_rx_antennas * spacing)
    lo = np.degrees(np.arcsin(np.clip(center - width, -1.0, 1.0)))
    hi = np.degrees(np.arcsin(np.clip(center + width, -1.0, 1.0)))
    first = int(np.ceil(lo / step_deg - 1e-9))
    last = int(np.floor(hi / step_deg + 1e-9))
    return np.arange(first, last + 1) * step_deg


def music_pseudospectrum(
    covariance: np.ndarray, n_sources: int, cfg: SystemConfig, grid_deg: np.ndarray
) -> np.ndarray:
    """1 / ||E_noise^H a(theta)||^2 over ``grid_deg``."""
    covariance = np.asarray(covariance, dtype=np.complex128)
    n_rx = cfg.num_rx_antennas
    if covariance.shape != (n_rx, n_rx):
        raise ValueError(f"covariance must be {(n_rx, n_rx)}, got {covariance.shape}")
    if not np.all(np.isfinite(covariance)):
        raise SubspaceError("covariance contains non-finite entries")
    if not 1 <= n_sources < n_rx:
        raise SubspaceError(
            f"{n_sources} sources leave no noise subspace on {n_rx} receive elements"
        )
    _, vecs = np.linalg.eigh(covariance)  # ascending eigenvalues
    noise = vecs[:, : n_rx - n_sources]
    proj = np.abs(noise.conj().T @ steering_vector(cfg, grid_deg).T) ** 2
    return 1.0 / np.maximum(proj.sum(axis=0), np.finfo(float).tiny)


def _top_local_maxima(values: np.ndarray, count: int) -> list:
    """Indices of the ``count`` tallest local maxima, topped up with the
    tallest remaining samples when the landscape has too few bumps."""
    v = np.asarray(values, dtype=float)
    if count > v.size:
        raise SubspaceError(f"cannot pick {count} peaks from {v.size} grid points")
    left = np.concatenate(([-np.inf], v[:-1]))
    right = np.concatenate((v[1:], [-np.inf]))
    peaks = np.flatnonzero((v >= left) & (v > right))
    chosen = list(peaks[np.argsort(v[peaks])[::-1]][:count])
    for idx in np.argsort(v)[::-1]:
        if len(chosen) == count:
            break
        if idx not in chosen:
            chosen.append(int(idx))
    return sorted(int(i) for i in chosen)


def _peak_count(spectrum: np.ndarray, rel_threshold: float) -> int:
    """Local maxima within ``rel_threshold`` of the tallest spectrum value."""
    v = np.asarray(spectrum, dtype=float)
    left = np.concatenate(([-np.inf], v[:-1]))
    right = np.concatenate((v[1:], [-np.inf]))
    peaks = (v >= left) & (v > right) & (v >= rel_threshold * v.max())
    return int(np.count_nonzero(peaks))


def music_angles(
    covariance: np.ndarray,
    n_sources: int,
    cfg: SystemConfig,
    grid_deg: np.ndarray,
    signal_dimension: int | None = None,
) -> np.ndarray:
    """The ``n_sources`` tallest pseudospectrum peaks, in ascending angle order.

    ``signal_dimension`` sets the signal-subspace size for the noise projector
    and defaults to ``n_sources``.  Pass the frame-wide source count when
    scanning one of several occupied bins — otherwise the other bins' signal
    eigenvectors stay inside the noise subspace and bias the peaks.
    """
    dim = n_sources if signal_dimension is None else signal_dimension
    spectrum = music_pseudospectrum(covariance, dim, cfg, grid_deg)
    return np.asarray(grid_deg)[_top_local_maxima(spectrum, n_sources)]


# --- least-squares grid search -------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CombinationFit:
    """Result of one exhaustive grid fit.

    ``values[q]`` refines source q (aligned with the angle order passed in)
    and is drawn from ``grids[q]``; ``coarse_residual`` is the best residual
    achievable with every source pinned to one of its coarse centers — an
    upper bound the refined residual can never exceed.
    """

    values: np.ndarray
    residual: float
    coarse_values: np.ndarray
    coarse_residual: float
    grids: tuple
    on_boundary: tuple
    gains: np.ndarray | None


def candidate_range_grid(range_bins, cfg: SystemConfig, points: int = 101) -> np.ndarray:
    """Union of per-bin windows (bin center +- half a range cell, inclusive);
    negative candidates are dropped."""
    res, _, _ = derived_resolutions(cfg)
    windows = [
        np.linspace(bin_index * res - res / 2.0, bin_index * res + res / 2.0, points)
        for bin_index in np.atleast_1d(range_bins)
    ]
    grid = np.unique(np.concatenate(windows))
    return grid[grid >= 0.0]


def candidate_velocity_grid(velocity_bins, cfg: SystemConfig, points: int = 11) -> np.ndarray:
    """Union of per-signed-bin windows (center +- half a velocity cell)."""
    _, res, _ = derived_resolutions(cfg)
    windows = [
        np.linspace(bin_index * res - res / 2.0, bin_index * res + res / 2.0, points)
        for bin_index in np.atleast_1d(velocity_bins)
    ]
    return np.unique(np.concatenate(windows))


def _combination_residuals(u, gram, energy, max_combinations):
    """Dense residual tensor over the Q-fold grid product (unit gains)."""
    shape = tuple(len(uq) for uq in u)
    if np.prod(shape, dtype=float) > max_combinations:
        raise ValueError(
            f"{int(np.prod(shape, dtype=float))} grid combinations exceed the "
            f"limit of {max_combinations}; reduce grid points or sources"
        )
    n_sources = len(u)

    def along(vec, axis):
        reshaped = [1] * n_sources
        reshaped[axis] = len(vec)
        return vec.reshape(reshaped)

    residual = np.full(shape, energy)
    for q, uq in enumerate(u):
        residual = residual - 2.0 * along(uq.real, q)
        residual = residual + along(np.real(np.diagonal(gram[q, q])).copy(), q)
    for q in range(n_sources):
        for p in range(q + 1, n_sources):
            block = 2.0 * gram[q, p].real
            expand = [None] * n_sources
            expand[q] = slice(None)
            expand[p] = slice(None)
            residual = residual + block[tuple(expand)]
    return residual


def _residual_at(combo, u, gram, energy, fit_gains):
    """Residual of one combination; fitted complex gains when requested."""
    n_sources = len(u)
    v = np.array([u[q][combo[q]] for q in range(n_sources)])
    g = np.array(
        [[gram[q, p][combo[q], combo[p]] for p in range(n_sources)] for q in range(n_sources)]
    )
    if not fit_gains:
        ones = np.ones(n_sources)
        return float(energy - 2.0 * v.real.sum() + np.real(ones @ g @ ones)), None
    try:
        gains = np.linalg.solve(g, v)
    except np.linalg.LinAlgError:
        gains = np.linalg.lstsq(g, v, rcond=None)[0]
    return float(energy - np.real(v.conj() @ gains)), gains


def _search_combinations(u, gram, energy, grids, centers, fit_gains, max_combinations):
    """Shared tail of the range and velocity fits: pick the best combination,
    evaluate the coarse-center baseline, flag boundary hits.

    ``grids[q]`` is source q's candidate array; ``centers[q]`` the coarse
    values that source may be pinned to for the baseline.
    """
    n_sources = len(u)
    shape = tuple(len(uq) for uq in u)
    if fit_gains:
        if np.prod(shape, dtype=float) > max_combinations:
            raise ValueError(
                f"{int(np.prod(shape, dtype=float))} grid combinations exceed the "
                f"limit of {max_combinations}; reduce grid points or sources"
            )
        best_combo, best_res, best_gains = None, np.inf, None
        for combo in np.ndindex(shape):
            res, gains = _residual_at(combo, u, gram, energy, True)
            if res < best_res:
                best_combo, best_res, best_gains = combo, res, gains
    else:
        residuals = _combination_residuals(u, gram, energy, max_combinations)
        best_combo = np.unravel_index(np.argmin(residuals), shape)
        best_res = float(residuals[best_combo])
        best_gains = None

    center_idx = [
        [int(np.argmin(np.abs(grids[q] - c))) for c in np.atleast_1d(centers[q])]
        for q in range(n_sources)
    ]
    coarse_combo, coarse_res = None, np.inf
    for combo in itertools.product(*center_idx):
        res, _ = _residual_at(combo, u, gram, energy, fit_gains)
        if res < coarse_res:
            coarse_combo, coarse_res = combo, res

    return CombinationFit(
        values=np.array([grids[q][best_combo[q]] for q in range(n_sources)]),
        residual=best_res,
        coarse_values=np.array([grids[q][coarse_combo[q]] for q in range(n_sources)]),
        coarse_residual=coarse_res,
        grids=tuple(np.asarray(g) for g in grids),
        on_boundary=tuple(best_combo[q] in (0, len(grids[q]) - 1) for q in range(n_sources)),
        gains=best_gains,
    )


def refine_ranges(
    grid: np.ndarray,
    data: np.ndarray,
    pattern: SwitchingPattern,
    cfg: SystemConfig,
    angles_deg,
    range_bins,
    options: RefineOptions = RefineOptions(),
) -> CombinationFit:
    """Joint range fit for the sources of one angle bin (see module docstring).

    Uses only OFDM symbol 0, where Doppler-induced range migration is zero.
    """
    grid = check_antenna_grid(cfg, grid)
    data = check_symbol_grid(cfg, data)
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=float))
    candidates = candidate_range_grid(range_bins, cfg, options.range_points)
    res, _, _ = derived_resolutions(cfg)
    centers = np.atleast_1d(range_bins) * res

    snapshot = grid[:, :, 0]  # (N_r, N_s)
    energy = float(np.sum(np.abs(snapshot) ** 2))
    s = np.arange(cfg.num_subcarriers)
    ramps = np.exp(
        -2j * np.pi * np.multiply.outer(s * cfg.subcarrier_spacing_hz, 2.0 * candidates / cfg.c)
    )  # (N_s, n_grid)

    steer = steering_vector(cfg, angles)  # (Q, N_r)
    scrambled = np.stack(
        [scramble_symbols(data[:, 0], pattern, cfg, angle) for angle in angles]
    )  # (Q, N_s)
    beamed = steer.conj() @ snapshot  # (Q, N_s)
    u = [ramps.conj().T @ (scrambled[q].conj() * beamed[q]) for q in range(len(angles))]

    array_gram = steer.conj() @ steer.T  # (Q, Q)
    gram = np.empty((len(angles), len(angles)), dtype=object)
    for q in range(len(angles)):
        for p in range(q, len(angles)):
            cross = scrambled[q].conj() * scrambled[p]  # (N_s,)
            block = array_gram[q, p] * (ramps.conj().T @ (cross[:, None] * ramps))
            gram[q, p] = block
            if p != q:
                gram[p, q] = block.conj().T
    fit = _search_combinations(
        u,
        gram,
        energy,
        [candidates] * len(angles),
        [centers] * len(angles),
        options.fit_gains,
        options.max_combinations,
    )
    if any(fit.on_boundary):
        warnings.warn(
            "refined range hit the edge of its search window; the optimum may "
            "lie outside the coarse cell",
            RuntimeWarning,
            stacklevel=2,
        )
    return fit


def refine_velocities(
    grid: np.ndarray,
    data: np.ndarray,
    pattern: SwitchingPattern,
    cfg: SystemConfig,
    angles_deg,
    ranges_m,
    velocity_bins,
    options: RefineOptions = RefineOptions(),
) -> CombinationFit:
    """Joint velocity fit for one angle bin, with angles and ranges frozen.

    ``velocity_bins`` is the pooled set of candidate signed slow-time bins for
    the whole angle bin.  Every source searches the union of the windows
    around those bins and the joint fit decides which source sits where: the
    per-source matched spectra cannot do that on their own, because a strong
    bin mate survives re-descrambling at a neighbouring angle with nearly
    full strength and can out-peak the source that the angle belongs to.
    """
    grid = check_antenna_grid(cfg, grid)
    data = check_symbol_grid(cfg, data)
    angles = np.atleast_1d(np.asarray(angles_deg, dtype=float))
    ranges = np.atleast_1d(np.asarray(ranges_m, dtype=float))
    if angles.shape != ranges.shape:
        raise ValueError("need one refined range per angle")
    candidates = candidate_velocity_grid(velocity_bins, cfg, options.velocity_points)
    grids = [candidates] * len(angles)
    _, res, _ = derived_resolutions(cfg)
    centers = [np.atleast_1d(velocity_bins) * res] * len(angles)

    energy = float(np.sum(np.abs(grid) ** 2))
    s = np.arange(cfg.num_subcarriers)
    mu = np.arange(cfg.num_ofdm_symbols)
    phase = np.exp(
        2j
        * np.pi
        * cfg.symbol_duration_s
        * np.multiply.outer(mu, 2.0 * candidates * cfg.carrier_freq_hz / cfg.c)
    )  # (N_p, n_grid)

    steer = steering_vector(cfg, angles)  # (Q, N_r)
    scrambled = np.stack(
        [scramble_symbols(data, pattern, cfg, angle) for angle in angles]
    )  # (Q, N_s, N_p)
    range_ramp = np.exp(
        -2j * np.pi * np.multiply.outer(2.0 * ranges / cfg.c, s * cfg.subcarrier_spacing_hz)
    )  # (Q, N_s)
    base = scrambled * range_ramp[:, :, None]  # (Q, N_s, N_p): atoms sans slow-time phase

    beamed = np.einsum("qm,msp->qsp", steer.conj(), grid)  # (Q, N_s, N_p)
    h = np.einsum("qsp,qsp->qp", base.conj(), beamed)  # (Q, N_p)
    u = [phase.conj().T @ h[q] for q in range(len(angles))]

    array_gram = steer.conj() @ steer.T
    gram = np.empty((len(angles), len(angles)), dtype=object)
    for q in range(len(angles)):
        for p in range(q, len(angles)):
            slow = np.einsum("sp,sp->p", base[q].conj(), base[p])  # (N_p,)
            block = array_gram[q, p] * (phase.conj().T @ (slow[:, None] * phase))
            gram[q, p] = block
            if p != q:
                gram[p, q] = block.conj().T
    fit = _search_combinations(
        u, gram, energy, grids, centers, options.fit_gains, options.max_combinations
    )
    if any(fit.on_boundary):
        warnings.warn(
            "refined velocity hit the edge of its search window; the optimum "
            "may lie outside the coarse cell",
            RuntimeWarning,
            stacklevel=2,
        )
    return fit


def matched_velocity_bins(
    rows: np.ndarray,
    data: np.ndarray,
    pattern: SwitchingPattern,
    cfg: SystemConfig,
    theta_deg: float,
    range_m: float,
    count: int = 1,
    detection: DetectionOptions = DetectionOptions(),
) -> list:
    """Signed slow-time bins of the strongest velocity peaks for one source.

    The coarse velocity spectra divide by the scrambling reference at the
    *bin center* angle, which decoheres a target sitting toward the edge of
    the bin.  Re-descrambling the same beamformed rows at the refined angle
    restores that target's slow-time ramp at nearly full strength, so its
    peak is always among the top few.  It is not reliably the single tallest
    one: a strong bin mate two degrees away also survives the re-descramble
    at close to full strength, and which of the two wins depends on the
    payload realization.  Returning the top ``count`` bins and letting the
    joint fit sort out the pairing avoids that coin flip.
    """
    rows = check_symbol_grid(cfg, rows)
    desc = descramble(rows, data, pattern, cfg, float(theta_deg), options=detection)
    response = range_response(desc.symbols, cfg)
    res, _, _ = derived_resolutions(cfg)
    gate = int(np.rint(float(range_m) / res)) % cfg.num_subcarriers
    spectrum = velocity_spectrum(response[gate], cfg)
    tops = _top_local_maxima(spectrum, count)
    return [int(signed_bin_index(int(i), cfg.num_ofdm_symbols)) for i in tops]


# --- full estimation -------------------------------------------------------------


def estimate_targets(
    grid: np.ndarray,
    data: np.ndarray,
    pattern: SwitchingPattern,
    cfg: SystemConfig,
    detection: DetectionOptions = DetectionOptions(),
    options: RefineOptions = RefineOptions(),
) -> EstimateSet:
    """Coarse pipeline plus per-bin refinement; the top-level estimator.

    An empty frame (nothing above the detection threshold) yields an empty
    estimate set rather than an error.

    The signal-subspace dimension is frame-global: by default the eigenvalue
    gap of the pooled covariance, floored at the number of occupied bins and
    capped at num_rx_antennas - 1.  Each bin then contributes as many refined
    sources as its pseudospectrum window shows qualifying peaks (or exactly
    ``options.num_sources`` when that override is set).
    """
    grid = check_antenna_grid(cfg, grid)
    data = check_symbol_grid(cfg, data)
    try:
        coarse = coarse_pipeline(grid, data, pattern, cfg, detection)
    except NoPeaksError:
        return EstimateSet(coarse=[], refined=[])

    covariance = sample_covariance(grid, options.covariance_symbol)
    max_dim = cfg.num_rx_antennas - 1
    dimension = options.signal_dimension
    if dimension is None:
        try:
            dimension = estimate_n_sources(np.linalg.eigvalsh(covariance), max_sources=max_dim)
        except SubspaceError:
            dimension = len(coarse.estimates)
        dimension = min(max(dimension, len(coarse.bins)), max_dim)

    refined = []
    for bin_result in coarse.bins:
        search = music_search_grid(bin_result.angle_bin, cfg, options.music_step_deg)
        spectrum = music_pseudospectrum(covariance, dimension, cfg, search)
        count = options.num_sources or _peak_count(spectrum, options.peak_rel_threshold)
        count = max(1, min(count, dimension))
        angles = search[_top_local_maxima(spectrum, count)]
        range_fit = refine_ranges(
            grid, data, pattern, cfg, angles, bin_result.range_bins, options
        )
        velocity_bins = set()
        for bins in bin_result.velocity_bins:
            velocity_bins.update(int(b) for b in bins)
        for q, angle in enumerate(angles):
            velocity_bins.update(
                matched_velocity_bins(
                    bin_result.rows,
                    data,
                    pattern,
                    cfg,
                    angle,
                    range_fit.values[q],
                    count=len(angles),
                    detection=detection,
                )
            )
        velocity_fit = refine_velocities(
            grid, data, pattern, cfg, angles, range_fit.values, sorted(velocity_bins), options
        )
        for q, angle in enumerate(angles):
            refined.append(
                RefinedEstimate(
                    angle_bin=bin_result.angle_bin,
                    angle_deg=float(angle),
                    range_m=float(range_fit.values[q]),
                    velocity_mps=float(velocity_fit.values[q]),
                )
            )
    return EstimateSet(coarse=list(coarse.estimates), refined=refined).validate()
