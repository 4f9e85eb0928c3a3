"""Monte-Carlo benchmark harness: scenario configs, trials, sweeps, calibration.

Angles cross this boundary in degrees; everything handed to the estimation
modules is converted to radians first.  A trial is a pure function of
(config, trial_index): the trial seed is ``config.seed + trial_index``, the
direction draw uses an rng derived from that seed, and the same seed drives
the snapshot simulation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from itertools import permutations

import numpy as np

from .arrays import (
    Scenario,
    UlaGeometry,
    build_dictionary,
    build_grid,
    sample_covariance,
    simulate_snapshots,
    snapshot_mean,
)
from .baselines import (
    RootDeficitError,
    bartlett_spectrum,
    music_spectrum,
    mvdr_spectrum,
    root_music,
)
from .pipeline import (
    ErrorStdTable,
    PipelineConfig,
    Sigma2Table,
    coarse_estimate,
    estimate_multisource,
)
from .solver import (
    SolverConfig,
    SolverNumericalError,
    constant_init,
    fixed_k,
    random_uniform_init,
    select_peaks,
    solve,
    spectrum,
)

METHODS = ("nuv_doa", "nuv_ssr_flat", "bartlett", "mvdr", "music", "root_music")

DEFAULT_SIGMA2_CANDIDATES = (3e0, 1e1, 3e1, 1e2, 3e2, 8e2, 3e3, 1e4)

_MAX_MATCH_SOURCES = 8
_DOA_STREAM_TAG = 0xD0A


@dataclass(frozen=True)
class DoaSampling:
    """How each trial draws its true directions (degrees at this boundary).

    ``fixed`` replays the same angles every trial; ``uniform_range`` draws
    each source uniformly in [lo, hi]; ``uniform_abs_range`` draws the
    magnitude uniformly in [lo, hi] and flips a fair sign, covering the
    two-sided boundary regime that a single uniform interval cannot express.
    """

    kind: str
    angles_deg: tuple = ()
    lo_deg: float = -75.0
    hi_deg: float = 75.0
    min_separation_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform_range", "uniform_abs_range"):
            raise ValueError(f"unknown doa_sampling kind {self.kind!r}")
        if self.kind == "fixed":
            if len(self.angles_deg) == 0:
                raise ValueError("fixed sampling needs at least one angle")
            object.__setattr__(self, "angles_deg",
                               tuple(float(a) for a in self.angles_deg))
        else:
            if not self.lo_deg < self.hi_deg:
                raise ValueError("need lo_deg < hi_deg")
            if self.kind == "uniform_abs_range" and self.lo_deg < 0:
                raise ValueError("abs-range bounds must be nonnegative")

    def draw(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Sorted true directions in radians."""
        if self.kind == "fixed":
            if len(self.angles_deg) != k:
                raise ValueError("fixed angle count does not match k_sources")
            return np.sort(np.radians(self.angles_deg))
        for _ in range(100):
            if self.kind == "uniform_range":
                doas = rng.uniform(self.lo_deg, self.hi_deg, size=k)
            else:
                doas = rng.uniform(self.lo_deg, self.hi_deg, size=k)
                doas *= rng.choice([-1.0, 1.0], size=k)
            doas = np.sort(doas)
            if k == 1 or np.diff(doas).min() > self.min_separation_deg:
                return np.radians(doas)
        raise RuntimeError("could not draw directions with the requested separation")


@dataclass(frozen=True)
class SolverSettings:
    """Solver knobs as they appear in config files."""

    sigma2: float | None = None
    max_iterations: int = 500
    tolerance: float = 1e-6
    init_kind: str = "constant"
    init_value: float = 1.0
    init_seed: int = 0


@dataclass(frozen=True)
class PipelineSettings:
    """Hierarchical-pipeline knobs as they appear in config files.

    ``known_snr`` is one of None (estimate from data), "scenario" (hand the
    pipeline the true simulated SNR), or a number in dB.
    """

    snr_gate_db: float = 7.0
    coarse_cells: int = 1801
    fine_step_deg: float = 0.01
    half_width_deg: float = 0.5
    known_snr: float | str | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    """One benchmark cell family: scenario, method(s), trial schedule."""

    k_sources: int = 1
    n_sensors: int = 16
    n_snapshots: int = 100
    snr_db: float = 10.0
    source_model: str = "noncoherent"
    method: str = "nuv_doa"
    methods: tuple = ()
    trials: int = 100
    seed: int = 0
    doa_sampling: DoaSampling = field(default_factory=lambda: DoaSampling("uniform_range"))
    snr_sweep: tuple = ()
    solver: SolverSettings = field(default_factory=SolverSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    flat_grid_cells: int = 3000
    baseline_grid_cells: int = 1801
    detection_threshold_deg: float = 1.0
    timing: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 1 <= self.k_sources < self.n_sensors:
            raise ValueError("need 1 <= k_sources < n_sensors")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.k_sources > _MAX_MATCH_SOURCES:
            raise ValueError("scoring supports at most 8 sources")

    @property
    def method_list(self) -> tuple:
        return self.methods if self.methods else (self.method,)

    @property
    def snr_list(self) -> tuple:
        return self.snr_sweep if self.snr_sweep else (self.snr_db,)

    def _init_spec(self):
        if self.solver.init_kind == "constant":
            return constant_init(self.solver.init_value)
        return random_uniform_init(self.solver.init_seed)

    def solver_config(self, sigma2: float) -> SolverConfig:
        return SolverConfig(sigma2=sigma2, n_snapshots=self.n_snapshots,
                            max_iterations=self.solver.max_iterations,
                            tolerance=self.solver.tolerance,
                            init=self._init_spec())

    def pipeline_config(self, snr_db: float | None = None) -> PipelineConfig:
        """Resolve pipeline settings; "scenario" pins the given true SNR."""
        known = self.pipeline.known_snr
        if known == "scenario":
            known = self.snr_db if snr_db is None else snr_db
        return PipelineConfig(
            snr_gate_db=self.pipeline.snr_gate_db,
            coarse_cells=self.pipeline.coarse_cells,
            fine_step=math.radians(self.pipeline.fine_step_deg),
            half_width=math.radians(self.pipeline.half_width_deg),
            sigma2=self.solver.sigma2,
            known_snr_db=known,
            max_iterations=self.solver.max_iterations,
            tolerance=self.solver.tolerance,
            init=self._init_spec(),
            workers=self.workers,
        )


@dataclass(frozen=True)
class TrialRecord:
    seed: int
    true_doas_deg: tuple
    estimates_deg: tuple | None
    matched_errors_deg: tuple | None
    method: str
    runtime_ms: float | None
    flags: tuple


@dataclass(frozen=True)
class Aggregates:
    rmse_deg: float | None
    median_abs_error_deg: float | None
    detection_rate: float
    false_alarm_count: int


@dataclass(frozen=True)
class RunReport:
    method: str
    snr_db: float
    n_snapshots: int
    k_sources: int
    trials: int
    detection_threshold_deg: float
    records: tuple
    aggregates: Aggregates


def match_and_score(estimates_deg, truth_deg):
    """Best assignment of estimates to truths over all permutations.

    Angles are plain degrees on a half-open interval, so differences are
    ordinary subtractions with no wraparound.  Returns (matched errors in
    truth order, rmse).
    """
    est = np.asarray(estimates_deg, dtype=float)
    tru = np.asarray(truth_deg, dtype=float)
    if est.shape != tru.shape or est.ndim != 1:
        raise ValueError("estimates and truth must be equal-length vectors")
    k = est.size
    if k > _MAX_MATCH_SOURCES:
        raise ValueError("exhaustive matching supports at most 8 sources")
    best = None
    best_perm = None
    for perm in permutations(range(k)):
        sq = float(np.sum((est[list(perm)] - tru) ** 2))
        if best is None or sq < best:
            best = sq
            best_perm = perm
    errors = est[list(best_perm)] - tru
    return errors, math.sqrt(best / k)


def resolve_sigma2(config: ScenarioConfig, snr_db: float) -> float:
    if config.solver.sigma2 is not None:
        return config.solver.sigma2
    from .pipeline import load_default_sigma2_table
    return load_default_sigma2_table().sigma2_for(snr_db)


def _flat_estimates(batch, config: ScenarioConfig, snr_db: float):
    geometry = UlaGeometry(config.n_sensors)
    grid = build_grid(config.flat_grid_cells)
    dictionary = build_dictionary(grid, geometry)
    stat = snapshot_mean(batch)
    solver_cfg = config.solver_config(resolve_sigma2(config, snr_db))
    _, moments, _ = solve(dictionary, stat, solver_cfg)
    peaks = select_peaks(spectrum(moments, grid), fixed_k(config.k_sources))
    flags = ("peak_fallback_filled",) if peaks.fallback_filled else ()
    return np.sort(peaks.angles), flags


def _grid_baseline_estimates(batch, config: ScenarioConfig, kind: str):
    grid = build_grid(config.baseline_grid_cells)
    cov = sample_covariance(batch)
    if kind == "bartlett":
        spec = bartlett_spectrum(cov, grid)
    elif kind == "mvdr":
        spec = mvdr_spectrum(cov, grid)
    else:
        spec = music_spectrum(cov, grid, config.k_sources)
    peaks = select_peaks(spec, fixed_k(config.k_sources))
    flags = ("peak_fallback_filled",) if peaks.fallback_filled else ()
    return np.sort(peaks.angles), flags


def run_method(batch, method: str, config: ScenarioConfig, snr_db: float):
    """Angles (radians, sorted) and flags for one method on one batch.

    Failures surface as a ``None`` estimate with a flag rather than an
    exception, so sweeps keep going.
    """
    try:
        if method == "nuv_doa":
            pl = config.pipeline_config(snr_db)
            angles, trace = estimate_multisource(batch, config.k_sources, pl)
            return angles, tuple(trace.flags)
        if method == "nuv_ssr_flat":
            return _flat_estimates(batch, config, snr_db)
        if method == "root_music":
            return root_music(sample_covariance(batch), config.k_sources), ()
        return _grid_baseline_estimates(batch, config, method)
    except RootDeficitError:
        return None, ("root_deficit",)
    except SolverNumericalError:
        return None, ("solver_numerical_failure",)


def run_trial(config: ScenarioConfig, trial_index: int,
              method: str | None = None, snr_db: float | None = None) -> TrialRecord:
    method = method or config.method_list[0]
    snr_db = config.snr_db if snr_db is None else snr_db
    trial_seed = config.seed + trial_index
    rng = np.random.default_rng((trial_seed, _DOA_STREAM_TAG))
    doas = config.doa_sampling.draw(config.k_sources, rng)
    scenario = Scenario(
        geometry=UlaGeometry(config.n_sensors),
        true_doas=doas,
        n_snapshots=config.n_snapshots,
        snr_db=snr_db,
        source_model=config.source_model,
    )
    batch = simulate_snapshots(scenario, trial_seed)
    started = time.perf_counter() if config.timing else None
    estimates, flags = run_method(batch, method, config, snr_db)
    runtime_ms = ((time.perf_counter() - started) * 1e3
                  if started is not None else None)
    truth_deg = np.degrees(doas)
    if estimates is None:
        return TrialRecord(seed=trial_seed,
                           true_doas_deg=tuple(truth_deg.tolist()),
                           estimates_deg=None, matched_errors_deg=None,
                           method=method, runtime_ms=runtime_ms, flags=flags)
    errors, _ = match_and_score(np.degrees(estimates), truth_deg)
    return TrialRecord(seed=trial_seed,
                       true_doas_deg=tuple(truth_deg.tolist()),
                       estimates_deg=tuple(np.degrees(estimates).tolist()),
                       matched_errors_deg=tuple(errors.tolist()),
                       method=method, runtime_ms=runtime_ms, flags=flags)


def aggregate(records, threshold_deg: float) -> Aggregates:
    """Pooled per-source metrics; trials without estimates count as misses."""
    pooled = [e for r in records if r.matched_errors_deg is not None
              for e in r.matched_errors_deg]
    detected = sum(
        1 for r in records
        if r.matched_errors_deg is not None
        and all(abs(e) < threshold_deg for e in r.matched_errors_deg))
    false_alarms = sum(1 for e in pooled if abs(e) >= threshold_deg)
    if pooled:
        arr = np.abs(np.asarray(pooled))
        rmse = float(np.sqrt(np.mean(arr ** 2)))
        median = float(np.median(arr))
    else:
        rmse = None
        median = None
    return Aggregates(rmse_deg=rmse, median_abs_error_deg=median,
                      detection_rate=detected / len(records) if records else 0.0,
                      false_alarm_count=false_alarms)


def run_cell(config: ScenarioConfig, method: str, snr_db: float) -> RunReport:
    """All trials of one (method, snr) cell, in deterministic trial order."""
    records = [run_trial(config, i, method=method, snr_db=snr_db)
               for i in range(config.trials)]
    return RunReport(method=method, snr_db=snr_db,
                     n_snapshots=config.n_snapshots,
                     k_sources=config.k_sources, trials=config.trials,
                     detection_threshold_deg=config.detection_threshold_deg,
                     records=tuple(records),
                     aggregates=aggregate(records, config.detection_threshold_deg))


def run_sweep(config: ScenarioConfig):
    """One RunReport per (method, snr) in the Cartesian product."""
    return [run_cell(config, method, snr)
            for method in config.method_list for snr in config.snr_list]


def calibrate_epsilon(config: ScenarioConfig):
    """Coarse-stage error std (degrees) per sweep SNR.

    A trial counts as successful when every coarse error is below the
    detection threshold; the std is taken over successful errors only, and
    entries backed by fewer than 30 successes are flagged.
    Returns (ErrorStdTable, per-entry flag tuples).
    """
    if not config.snr_list:
        raise ValueError("calibration needs at least one SNR point")
    snrs = []
    epsilons = []
    entry_flags = []
    for snr_db in config.snr_list:
        good = []
        cfg = config.pipeline_config(snr_db)
        for i in range(config.trials):
            trial_seed = config.seed + i
            rng = np.random.default_rng((trial_seed, _DOA_STREAM_TAG))
            doas = config.doa_sampling.draw(config.k_sources, rng)
            scenario = Scenario(geometry=UlaGeometry(config.n_sensors),
                                true_doas=doas, n_snapshots=config.n_snapshots,
                                snr_db=snr_db, source_model=config.source_model)
            batch = simulate_snapshots(scenario, trial_seed)
            try:
                coarse = coarse_estimate(batch, config.k_sources, cfg)
            except (RootDeficitError, SolverNumericalError):
                continue
            errors, _ = match_and_score(np.degrees(coarse.angles),
                                        np.degrees(doas))
            if all(abs(e) < config.detection_threshold_deg for e in errors):
                good.extend(errors)
        snrs.append(snr_db)
        if len(good) >= 2:
            epsilons.append(max(float(np.std(good)), 1e-6))
        else:
            epsilons.append(1.0)
        entry_flags.append(("low_confidence",) if len(good) < 30 else ())
    table = ErrorStdTable(snrs_db=tuple(snrs), epsilons_deg=tuple(epsilons))
    return table, tuple(entry_flags)


def calibrate_sigma2(config: ScenarioConfig, candidates=DEFAULT_SIGMA2_CANDIDATES):
    """Pick the RMSE-minimizing solver noise floor per sweep SNR.

    Ties resolve toward the smaller candidate.  Returns a Sigma2Table.
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    ordered = sorted(float(c) for c in candidates)
    snrs = []
    chosen = []
    for snr_db in config.snr_list:
        best = None
        best_rmse = None
        for cand in ordered:
            cfg = replace(config, solver=replace(config.solver, sigma2=cand))
            records = [run_trial(cfg, i, method="nuv_ssr_flat", snr_db=snr_db)
                       for i in range(config.trials)]
            agg = aggregate(records, config.detection_threshold_deg)
            rmse = agg.rmse_deg if agg.rmse_deg is not None else math.inf
            if best_rmse is None or rmse < best_rmse:
                best_rmse = rmse
                best = cand
        snrs.append(snr_db)
        chosen.append(best)
    return Sigma2Table(snrs_db=tuple(snrs), sigma2s=tuple(chosen))
