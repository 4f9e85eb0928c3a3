"""Sub-band scanning: spatially localized solves on overlapping fine grids.

A scan covers an angular span with a fine step.  Every scan point gets its
own narrow band (half-width ``half_width``, same fine step) centered on it;
the sparse solver runs on that band's dictionary alone and only the solved
magnitude of the band's center atom is kept.  Stitching the center values
together produces a spectrum whose resolution is set by the fine step
rather than by a full-azimuth grid, at the price of one small solve per
scan point.

Bands are solved as a stack: their dictionaries are padded to a common
width with zero columns (a zero column with zero starting variance never
moves and never couples into the solve) so each variance sweep is one
batched linear solve instead of a Python loop over bands.  Every band still
follows its own convergence schedule; a band leaves the active stack the
moment its own stopping rule fires.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .arrays import (
    AngleGrid,
    UlaGeometry,
    build_band_grid,
    build_centered_grid,
    steering_matrix,
)
from .solver import (
    PeakRule,
    PeakSelection,
    SolverConfig,
    SolverNumericalError,
    Spectrum,
    initial_state,
    select_peaks,
)

_MAX_STACK = 512


@dataclass(frozen=True)
class SubBand:
    """One localized solve region; the scan keeps only the center atom."""

    center: float
    half_width: float
    grid: AngleGrid
    center_index: int


@dataclass(frozen=True)
class SubBandPlan:
    """All bands of a scan, one per scan-grid point."""

    scan_grid: AngleGrid
    bands: tuple
    half_width: float
    fine_step: float


def plan_subbands(scan_lo: float, scan_hi: float, fine_step: float,
                  half_width: float) -> SubBandPlan:
    """Lay out one sub-band per scan point.

    Interior bands hold exactly ``2 * (half_width / fine_step) + 1`` grid
    points when the ratio is integral; bands near +-90 deg are truncated at
    the domain edge, never wrapped.  Every band grid contains its scan point
    exactly.
    """
    if half_width < fine_step:
        raise ValueError("half_width must be at least the fine step")
    scan_grid = build_band_grid(scan_lo, scan_hi, fine_step)
    bands = []
    for center in scan_grid.values:
        grid = build_centered_grid(float(center), half_width, fine_step)
        center_index = int(np.nonzero(grid.values == center)[0][0])
        bands.append(SubBand(center=float(center), half_width=half_width,
                             grid=grid, center_index=center_index))
    return SubBandPlan(scan_grid=scan_grid, bands=tuple(bands),
                       half_width=half_width, fine_step=fine_step)


def _band_stack(bands, geometry: UlaGeometry, init):
    """Zero-padded dictionary stack and starting variances for a band list."""
    n = geometry.n_sensors
    width = max(band.grid.values.size for band in bands)
    mats = np.zeros((len(bands), n, width), dtype=complex)
    pv = np.zeros((len(bands), width))
    for i, band in enumerate(bands):
        m = band.grid.values.size
        mats[i, :, :m] = steering_matrix(band.grid.values, geometry)
        pv[i, :m] = initial_state(m, init).prior_variances
    return mats, pv


def _failing_centers(gram, bands, active):
    centers = []
    for row, band_index in enumerate(active):
        block = gram[row]
        bad = not np.all(np.isfinite(block))
        if not bad:
            try:
                np.linalg.cholesky(block)
            except np.linalg.LinAlgError:
                bad = True
        if bad:
            centers.append(bands[band_index].center)
    return centers


def _solve_band_stack(bands, stat, config: SolverConfig,
                      geometry: UlaGeometry) -> np.ndarray:
    """Center-atom magnitudes for a list of bands sharing one statistic.

    Each band runs the same variance fixed point as the single-problem
    solver: sweep, update, stop when its own max-norm change drops under
    ``tolerance * max(1, ||pv||_inf)``, then one final moment evaluation at
    the stopped variances.
    """
    mean = stat.mean if hasattr(stat, "mean") else np.asarray(stat)
    n = geometry.n_sensors
    if mean.size != n:
        raise ValueError("statistic and geometry disagree on sensor count")
    mats, pv = _band_stack(bands, geometry, config.init)
    count, _, width = mats.shape
    final_pv = np.empty_like(pv)
    active = np.arange(count)
    noise_eye = config.noise_scale * np.eye(n)

    def sweep(indices, pv_stack, iteration):
        matrix_stack = mats[indices]
        scaled = matrix_stack * pv_stack[:, None, :]
        gram = scaled @ matrix_stack.conj().swapaxes(1, 2)
        gram = (gram + gram.conj().swapaxes(1, 2)) / 2.0
        gram += noise_eye
        rhs = np.empty((matrix_stack.shape[0], n, width + 1), dtype=complex)
        rhs[:, :, 0] = mean
        rhs[:, :, 1:] = matrix_stack
        try:
            if not np.all(np.isfinite(gram)):
                raise np.linalg.LinAlgError("non-finite covariance")
            solved = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            centers = _failing_centers(gram, bands, indices)
            raise SolverNumericalError(
                "sub-band factorization failed at centers "
                f"{[round(np.degrees(c), 4) for c in centers]} deg",
                iteration) from None
        conj = matrix_stack.conj()
        post_mean = pv_stack * np.einsum("bnm,bn->bm", conj, solved[:, :, 0])
        gain = np.einsum("bnm,bnm->bm", conj, solved[:, :, 1:]).real
        return post_mean, gain

    for iteration in range(1, config.max_iterations + 1):
        pv_active = pv[active]
        post_mean, gain = sweep(active, pv_active, iteration)
        raw = pv_active - pv_active * pv_active * gain
        pv_new = np.abs(post_mean) ** 2 + np.maximum(raw, 0.0)
        change = np.max(np.abs(pv_new - pv_active), axis=1)
        scale = np.maximum(1.0, pv_new.max(axis=1, initial=0.0))
        pv[active] = pv_new
        done = change < config.tolerance * scale
        if np.any(done):
            final_pv[active[done]] = pv_new[done]
            active = active[~done]
        if active.size == 0:
            break
    if active.size:
        final_pv[active] = pv[active]
    post_mean, _ = sweep(np.arange(count), final_pv,
                         config.max_iterations + 1)
    centers = np.array([band.center_index for band in bands])
    return np.abs(post_mean[np.arange(count), centers])


def solve_subband(band: SubBand, stat, config: SolverConfig,
                  geometry: UlaGeometry) -> float:
    """Run the sparse solver on one band; return the center-atom magnitude."""
    try:
        return float(_solve_band_stack([band], stat, config, geometry)[0])
    except SolverNumericalError as exc:
        raise SolverNumericalError(
            f"band centered at {np.degrees(band.center):.4f} deg failed: {exc}",
            exc.iteration) from None


def superres_scan(plan: SubBandPlan, stat, config: SolverConfig,
                  geometry: UlaGeometry, workers: int = 1) -> Spectrum:
    """Evaluate every band of the plan and stitch the center magnitudes.

    Bands are independent; stacking and the worker count only control how
    the work is grouped and have no effect on the values, because every
    band is solved on its own slice of the stack.
    """
    total = len(plan.bands)
    values = np.zeros(total)
    per_chunk = min(_MAX_STACK, max(1, -(-total // max(1, workers))))
    chunks = [(start, plan.bands[start:start + per_chunk])
              for start in range(0, total, per_chunk)]
    if workers > 1 and len(chunks) > 1:
        def run(item):
            start, bands = item
            return start, _solve_band_stack(list(bands), stat, config, geometry)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for start, chunk_values in pool.map(run, chunks):
                values[start:start + chunk_values.size] = chunk_values
    else:
        for start, bands in chunks:
            values[start:start + len(bands)] = _solve_band_stack(
                list(bands), stat, config, geometry)
    return Spectrum(values=values, grid=plan.scan_grid)


def detect_fine(spec: Spectrum, rule: PeakRule) -> PeakSelection:
    """Peak-pick a stitched fine spectrum (same rules as the flat solver)."""
    return select_peaks(spec, rule)
