"""Hierarchical multi-source estimation: coarse fix, cancel, refine.

For each source the pipeline first locates all sources coarsely (a
covariance polynomial estimator at comfortable SNR, the sparse solver on a
coarse full-azimuth grid otherwise), then subtracts the least-squares fit
of the other sources' steering vectors from the snapshot mean, and finally
runs the sub-band scan on a window around the source's coarse angle whose
width comes from a calibrated table of coarse error standard deviations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .arrays import (
    SnapshotBatch,
    SufficientStatistic,
    UlaGeometry,
    build_dictionary,
    build_grid,
    sample_covariance,
    snapshot_mean,
    steering_matrix,
)
from .baselines import RootDeficitError, root_music
from .solver import (
    InitSpec,
    SolverConfig,
    constant_init,
    fixed_k,
    select_peaks,
    solve,
    spectrum,
)
from .subbands import plan_subbands, superres_scan

_FALLBACK_EPSILON_DEG = 1.0


@dataclass(frozen=True)
class ErrorStdTable:
    """Coarse-error standard deviation (degrees) per SNR point.

    Lookups interpolate linearly between the tabulated SNR points.  Outside
    the tabulated range the conservative 1 deg fallback applies, except for
    single-entry tables which always answer with their entry.
    """

    snrs_db: tuple
    epsilons_deg: tuple

    def __post_init__(self):
        snrs = tuple(float(s) for s in self.snrs_db)
        eps = tuple(float(e) for e in self.epsilons_deg)
        if len(snrs) != len(eps):
            raise ValueError("table columns differ in length")
        if any(e <= 0 for e in eps):
            raise ValueError("error std must be positive")
        if list(snrs) != sorted(set(snrs)):
            raise ValueError("SNR points must be strictly increasing")
        object.__setattr__(self, "snrs_db", snrs)
        object.__setattr__(self, "epsilons_deg", eps)

    def epsilon_for(self, snr_db: float) -> float:
        """Window half-scale (radians) for a coarse estimate at this SNR."""
        if len(self.snrs_db) == 0:
            eps_deg = _FALLBACK_EPSILON_DEG
        elif len(self.snrs_db) == 1:
            eps_deg = self.epsilons_deg[0]
        elif snr_db < self.snrs_db[0] or snr_db > self.snrs_db[-1]:
            eps_deg = _FALLBACK_EPSILON_DEG
        else:
            eps_deg = float(np.interp(snr_db, self.snrs_db, self.epsilons_deg))
        return max(math.radians(eps_deg), 1e-12)


@dataclass(frozen=True)
class Sigma2Table:
    """Solver noise-floor tuning per SNR point; nearest edge outside."""

    snrs_db: tuple
    sigma2s: tuple

    def __post_init__(self):
        snrs = tuple(float(s) for s in self.snrs_db)
        sig = tuple(float(s) for s in self.sigma2s)
        if len(snrs) != len(sig) or len(snrs) == 0:
            raise ValueError("table must have matching, nonempty columns")
        if any(s <= 0 for s in sig):
            raise ValueError("sigma2 values must be positive")
        if list(snrs) != sorted(set(snrs)):
            raise ValueError("SNR points must be strictly increasing")
        object.__setattr__(self, "snrs_db", snrs)
        object.__setattr__(self, "sigma2s", sig)

    def sigma2_for(self, snr_db: float) -> float:
        log_values = np.log10(self.sigma2s)
        return float(10.0 ** np.interp(snr_db, self.snrs_db, log_values))


def _load_packaged(name: str) -> dict:
    with resources.files("nuvdoa.data").joinpath(name).open() as handle:
        return json.load(handle)


def load_default_error_table() -> ErrorStdTable:
    payload = _load_packaged("epsilon_table.json")
    entries = payload["entries"]
    return ErrorStdTable(
        snrs_db=tuple(e["snr_db"] for e in entries),
        epsilons_deg=tuple(e["epsilon_deg"] for e in entries),
    )


def load_default_sigma2_table() -> Sigma2Table:
    payload = _load_packaged("sigma2_table.json")
    entries = payload["entries"]
    return Sigma2Table(
        snrs_db=tuple(e["snr_db"] for e in entries),
        sigma2s=tuple(e["sigma2"] for e in entries),
    )


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the hierarchical estimator.

    ``sigma2 = None`` resolves the solver tuning from the SNR-indexed table;
    ``known_snr_db = None`` makes the pipeline estimate the SNR from the
    sample covariance instead of trusting a declared value.
    """

    snr_gate_db: float = 7.0
    coarse_cells: int = 1801
    fine_step: float = math.radians(0.01)
    half_width: float = math.radians(0.5)
    sigma2: float | None = None
    sigma2_table: Sigma2Table | None = None
    error_table: ErrorStdTable | None = None
    known_snr_db: float | None = None
    max_iterations: int = 500
    tolerance: float = 1e-6
    init: InitSpec = field(default_factory=lambda: constant_init(1.0))
    workers: int = 1

    def __post_init__(self):
        if self.coarse_cells < 2:
            raise ValueError("coarse grid needs at least 2 cells")
        if self.fine_step <= 0 or self.half_width < self.fine_step:
            raise ValueError("need 0 < fine_step <= half_width")
        if math.pi / self.coarse_cells <= self.fine_step:
            raise ValueError("coarse grid step must exceed the fine step")

    def resolve_sigma2(self, snr_db: float) -> float:
        if self.sigma2 is not None:
            return self.sigma2
        table = self.sigma2_table or load_default_sigma2_table()
        return table.sigma2_for(snr_db)

    def resolve_epsilon(self, snr_db: float) -> float:
        table = self.error_table or load_default_error_table()
        return table.epsilon_for(snr_db)

    def solver_config(self, n_snapshots: int, sigma2: float) -> SolverConfig:
        return SolverConfig(
            sigma2=sigma2,
            n_snapshots=n_snapshots,
            max_iterations=self.max_iterations,
            tolerance=self.tolerance,
            init=self.init,
        )


@dataclass(frozen=True)
class CoarseEstimate:
    """Output of the coarse stage, sorted ascending."""

    angles: np.ndarray
    method: str
    effective_snr_db: float
    flags: tuple = ()


@dataclass(frozen=True)
class PipelineTrace:
    """Everything the hierarchical run decided along the way."""

    coarse: CoarseEstimate
    epsilon: float
    windows: tuple
    flags: tuple


def estimate_effective_snr(cov: np.ndarray) -> float:
    """SNR guess from the eigenvalue floor of a sample covariance.

    Treats the smallest eigenvalue as the noise power and everything above
    that floor as signal: ``10 log10((trace - n*lmin) / (n*lmin))``.  A
    rank-deficient covariance has no usable floor and reads as infinite.
    """
    values = np.linalg.eigvalsh(cov)
    n = cov.shape[0]
    trace = float(values.sum())
    floor = float(values[0]) * n
    if floor <= 1e-15 * max(trace, 1.0):
        return math.inf
    signal = trace - floor
    if signal <= 0.0:
        return -math.inf
    return 10.0 * math.log10(signal / floor)


def coarse_estimate(batch: SnapshotBatch, n_sources: int,
                    config: PipelineConfig) -> CoarseEstimate:
    """Locate all sources coarsely.

    Uses the covariance polynomial estimator when the effective SNR clears
    the gate, otherwise (or when rooting comes up short) the sparse solver
    on a coarse full-azimuth grid with fixed-count peak picking.
    """
    geometry = UlaGeometry(batch.n_sensors)
    if not 1 <= n_sources < geometry.n_sensors:
        raise ValueError("n_sources must be positive and below the sensor count")
    if config.known_snr_db is not None:
        effective = config.known_snr_db
    else:
        effective = estimate_effective_snr(sample_covariance(batch))
    flags = []
    if effective >= config.snr_gate_db:
        try:
            angles = root_music(sample_covariance(batch), n_sources)
            return CoarseEstimate(angles=angles, method="root_music",
                                  effective_snr_db=effective)
        except RootDeficitError:
            flags.append("root_deficit_fallback")
    grid = build_grid(config.coarse_cells)
    dictionary = build_dictionary(grid, geometry)
    stat = snapshot_mean(batch)
    solver_cfg = config.solver_config(batch.n_snapshots,
                                      config.resolve_sigma2(effective))
    _, moments, _ = solve(dictionary, stat, solver_cfg)
    peaks = select_peaks(spectrum(moments, grid), fixed_k(n_sources))
    if peaks.fallback_filled:
        flags.append("peak_fallback_filled")
    return CoarseEstimate(angles=np.sort(peaks.angles), method="nuv_coarse",
                          effective_snr_db=effective, flags=tuple(flags))


def cancel_interference(stat: SufficientStatistic, coarse_angles,
                        target_index: int, geometry: UlaGeometry):
    """Strip the other sources' least-squares fit from the snapshot mean.

    Returns the residual statistic and any flags.  The residual is exactly
    orthogonal to the neighbors' steering vectors up to rounding; with a
    single source the statistic passes through untouched.  Duplicate
    neighbor angles are collapsed before fitting.
    """
    angles = np.asarray(coarse_angles, dtype=float)
    if not 0 <= target_index < angles.size:
        raise ValueError("target_index out of range")
    others = np.delete(angles, target_index)
    if others.size == 0:
        return stat, ()
    flags = []
    others = np.sort(others)
    keep = np.concatenate([[True], np.diff(others) > 1e-9])
    if not np.all(keep):
        others = others[keep]
        flags.append("duplicate_neighbors_dropped")
    basis = steering_matrix(others, geometry)
    coeff, *_ = np.linalg.lstsq(basis, stat.mean, rcond=None)
    residual = stat.mean - basis @ coeff
    return (SufficientStatistic(mean=residual, n_snapshots=stat.n_snapshots),
            tuple(flags))


def refine_source(stat: SufficientStatistic, coarse_angle: float,
                  epsilon: float, config: PipelineConfig,
                  geometry: UlaGeometry, sigma2: float):
    """Sub-band scan of a +-3 epsilon window around one coarse angle.

    Returns the scan argmax (ties fall to the lowest scan angle) plus
    flags; an empty post-clipping window falls back to the coarse angle and
    an all-zero scan is flagged as a non-detection.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    try:
        plan = plan_subbands(coarse_angle - 3.0 * epsilon,
                             coarse_angle + 3.0 * epsilon,
                             config.fine_step, config.half_width)
    except ValueError:
        return coarse_angle, ("empty_window",)
    solver_cfg = config.solver_config(stat.n_snapshots, sigma2)
    scan = superres_scan(plan, stat, solver_cfg, geometry,
                         workers=config.workers)
    best = int(np.argmax(scan.values))
    flags = () if scan.values[best] > 0.0 else ("no_detection",)
    return float(scan.grid.values[best]), flags


def estimate_multisource(batch: SnapshotBatch, n_sources: int,
                         config: PipelineConfig):
    """Full hierarchical run; returns sorted angles and the trace."""
    geometry = UlaGeometry(batch.n_sensors)
    coarse = coarse_estimate(batch, n_sources, config)
    epsilon = config.resolve_epsilon(coarse.effective_snr_db)
    sigma2 = config.resolve_sigma2(coarse.effective_snr_db)
    stat = snapshot_mean(batch)
    refined = np.empty(n_sources)
    windows = []
    flags = list(coarse.flags)
    for index in range(n_sources):
        residual, cancel_flags = cancel_interference(
            stat, coarse.angles, index, geometry)
        angle, refine_flags = refine_source(
            residual, float(coarse.angles[index]), epsilon, config,
            geometry, sigma2)
        refined[index] = angle
        windows.append((float(coarse.angles[index]) - 3.0 * epsilon,
                        float(coarse.angles[index]) + 3.0 * epsilon))
        flags.extend(cancel_flags)
        flags.extend(refine_flags)
    trace = PipelineTrace(coarse=coarse, epsilon=epsilon,
                          windows=tuple(windows), flags=tuple(flags))
    return np.sort(refined), trace
