"""Sparse spectrum recovery from the snapshot mean via unknown prior variances.

Each grid atom gets a zero-mean complex Gaussian prior whose variance is a
free parameter; type-II maximum likelihood over those variances is run by
fixed-point iteration.  One sweep computes the posterior mean and variance
of the atom amplitudes under the current prior variances, then replaces each
prior variance with posterior second moment ``|mean|^2 + variance``.  Atoms
that the data does not support collapse to zero variance, which is what
produces a sparse angular spectrum.

All computations run on the snapshot mean only; the snapshot count enters
through the noise scale ``sigma2 / n_snapshots``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .arrays import AngleGrid, SteeringDictionary, SufficientStatistic


class SolverNumericalError(RuntimeError):
    """Raised when a precision-matrix factorization breaks down."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass(frozen=True)
class InitSpec:
    """How to seed the prior variances: constant, or uniform on (0.5, 1.5]."""

    kind: str
    value: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "random_uniform"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "constant" and self.value <= 0:
            raise ValueError("constant init value must be positive")


def constant_init(value: float = 1.0) -> InitSpec:
    return InitSpec(kind="constant", value=value)


def random_uniform_init(seed: int = 0) -> InitSpec:
    return InitSpec(kind="random_uniform", seed=seed)


@dataclass(frozen=True)
class SolverConfig:
    """Tuning knobs of the variance iteration.

    ``sigma2`` is the noise-floor tuning parameter; together with the
    snapshot count it sets the regularization ``sigma2 / n_snapshots``.
    """

    sigma2: float
    n_snapshots: int
    max_iterations: int = 500
    tolerance: float = 1e-6
    init: InitSpec = field(default_factory=lambda: random_uniform_init(0))

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.n_snapshots < 1:
            raise ValueError("n_snapshots must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")

    @property
    def noise_scale(self) -> float:
        return self.sigma2 / self.n_snapshots

    def replace(self, **kwargs) -> "SolverConfig":
        from dataclasses import replace as _replace

        return _replace(self, **kwargs)


@dataclass(frozen=True)
class NuvState:
    """Per-atom prior variances at some iteration of the fixed point."""

    prior_variances: np.ndarray
    iteration: int = 0

    def __post_init__(self):
        pv = np.asarray(self.prior_variances, dtype=float)
        if pv.ndim != 1:
            raise ValueError("prior variances must be a vector")
        if not np.all(np.isfinite(pv)) or np.any(pv < 0):
            raise ValueError("prior variances must be finite and nonnegative")
        object.__setattr__(self, "prior_variances", pv)


@dataclass(frozen=True)
class PosteriorMoments:
    """Posterior mean and (clamped) marginal variance of the atom amplitudes.

    ``clamp_excursion`` records how far below zero the worst raw variance
    went before clamping; it is zero when no clamping happened.
    """

    mean: np.ndarray
    variance: np.ndarray
    clamp_excursion: float = 0.0


@dataclass(frozen=True)
class Spectrum:
    """Magnitudes of the posterior mean over an angle grid."""

    values: np.ndarray
    grid: AngleGrid


@dataclass(frozen=True)
class SolveTrace:
    """Diagnostics of one solve run."""

    iterations: int
    final_change: float
    converged: bool
    worst_clamp_excursion: float
    history: tuple = ()


@dataclass(frozen=True)
class PeakRule:
    """Peak-picking rule: fixed count (``fixed_k``) or threshold (``eta``)."""

    kind: str
    k: int = 0
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed_k", "threshold"):
            raise ValueError(f"unknown peak rule {self.kind!r}")
        if self.kind == "fixed_k" and self.k < 1:
            raise ValueError("fixed_k needs k >= 1")


def fixed_k(k: int) -> PeakRule:
    return PeakRule(kind="fixed_k", k=k)


def threshold(eta: float) -> PeakRule:
    return PeakRule(kind="threshold", eta=eta)


@dataclass(frozen=True)
class PeakSelection:
    """Selected spectrum peaks, strongest first.

    ``fallback_filled`` marks selections where fewer strict local maxima
    existed than requested and the remaining slots were filled with the
    largest leftover spectrum values.
    """

    rule: PeakRule
    indices: np.ndarray
    angles: np.ndarray
    fallback_filled: bool = False


def _as_matrix(dictionary) -> np.ndarray:
    if isinstance(dictionary, SteeringDictionary):
        return dictionary.matrix
    return np.asarray(dictionary)


def _as_mean(stat) -> np.ndarray:
    if isinstance(stat, SufficientStatistic):
        return stat.mean
    return np.asarray(stat)


def initial_state(n_atoms: int, init: InitSpec) -> NuvState:
    """Starting prior variances for a dictionary with ``n_atoms`` columns."""
    if init.kind == "constant":
        pv = np.full(n_atoms, init.value, dtype=float)
    else:
        rng = np.random.default_rng(init.seed)
        # 1.5 - U[0,1) lands in (0.5, 1.5].
        pv = 1.5 - rng.random(n_atoms)
    return NuvState(prior_variances=pv, iteration=0)


def precision_matrix(dictionary, state: NuvState, config: SolverConfig) -> np.ndarray:
    """Inverse of the marginal observation covariance under the current priors.

    Builds ``A diag(pv) A^H + (sigma2/L) I`` (sensor-count sized, never the
    atom-count sized dual) and inverts it through a Cholesky factorization.
    The result is symmetrized before it is returned.
    """
    matrix = _as_matrix(dictionary)
    pv = state.prior_variances
    if matrix.shape[1] != pv.size:
        raise ValueError("dictionary and state disagree on atom count")
    gram = (matrix * pv) @ matrix.conj().T
    gram[np.diag_indices_from(gram)] += config.noise_scale
    if not np.all(np.isfinite(gram)):
        raise SolverNumericalError("observation covariance is not finite",
                                   state.iteration)
    try:
        factor = cho_factor(gram, lower=True, check_finite=False)
    except (LinAlgError, ValueError) as exc:
        raise SolverNumericalError(
            f"precision factorization failed: {exc}", state.iteration
        ) from None
    precision = cho_solve(factor, np.eye(matrix.shape[0], dtype=complex),
                          check_finite=False)
    return (precision + precision.conj().T) / 2.0


def posterior_moments(dictionary, state: NuvState, precision: np.ndarray,
                      stat) -> PosteriorMoments:
    """Closed-form posterior mean and marginal variances of the amplitudes.

    mean = pv * A^H W ybar, variance = pv - pv^2 * diag(A^H W A), with W the
    precision matrix.  Tiny negative variances from rounding are clamped to
    zero and the worst excursion is reported.
    """
    matrix = _as_matrix(dictionary)
    pv = state.prior_variances
    ybar = _as_mean(stat)
    filtered = precision @ matrix
    mean = pv * (matrix.conj().T @ (precision @ ybar))
    gain = np.einsum("nm,nm->m", matrix.conj(), filtered).real
    raw = pv - pv * pv * gain
    excursion = float(max(0.0, -raw.min())) if raw.size else 0.0
    return PosteriorMoments(mean=mean, variance=np.maximum(raw, 0.0),
                            clamp_excursion=excursion)


def em_step(dictionary, state: NuvState, stat, config: SolverConfig) -> NuvState:
    """One fixed-point sweep: posterior moments, then pv <- |mean|^2 + var."""
    precision = precision_matrix(dictionary, state, config)
    moments = posterior_moments(dictionary, state, precision, stat)
    pv_new = np.abs(moments.mean) ** 2 + moments.variance
    return NuvState(prior_variances=pv_new, iteration=state.iteration + 1)


def solve(dictionary, stat, config: SolverConfig, keep_history: bool = False):
    """Run the variance fixed point to convergence.

    Iterates until the max-norm change of the prior variances drops below
    ``tolerance * max(1, ||pv||_inf)`` or ``max_iterations`` is reached,
    then evaluates the posterior moments once more at the final variances.

    Returns
    -------
    (NuvState, PosteriorMoments, SolveTrace)
    """
    matrix = _as_matrix(dictionary)
    ybar = _as_mean(stat)
    if not np.all(np.isfinite(ybar)):
        raise ValueError("snapshot mean contains non-finite entries")
    if matrix.shape[0] != ybar.size:
        raise ValueError("dictionary and statistic disagree on sensor count")
    state = initial_state(matrix.shape[1], config.init)
    history = [state.prior_variances.copy()] if keep_history else None
    worst_excursion = 0.0
    change = np.inf
    converged = False
    for _ in range(config.max_iterations):
        precision = precision_matrix(matrix, state, config)
        moments = posterior_moments(matrix, state, precision, ybar)
        worst_excursion = max(worst_excursion, moments.clamp_excursion)
        pv_new = np.abs(moments.mean) ** 2 + moments.variance
        change = float(np.max(np.abs(pv_new - state.prior_variances)))
        state = NuvState(prior_variances=pv_new, iteration=state.iteration + 1)
        if history is not None:
            history.append(pv_new.copy())
        if change < config.tolerance * max(1.0, float(pv_new.max(initial=0.0))):
            converged = True
            break
    precision = precision_matrix(matrix, state, config)
    moments = posterior_moments(matrix, state, precision, ybar)
    worst_excursion = max(worst_excursion, moments.clamp_excursion)
    trace = SolveTrace(
        iterations=state.iteration,
        final_change=change,
        converged=converged,
        worst_clamp_excursion=worst_excursion,
        history=tuple(history) if history is not None else (),
    )
    return state, moments, trace


def spectrum(moments: PosteriorMoments, grid: AngleGrid) -> Spectrum:
    """Angular spectrum: magnitude of the posterior mean per grid atom."""
    values = np.abs(moments.mean)
    if values.size != len(grid):
        raise ValueError("moments and grid disagree on atom count")
    return Spectrum(values=values, grid=grid)


def _strict_local_maxima(values: np.ndarray) -> np.ndarray:
    m = values.size
    if m == 1:
        return np.array([0])
    keep = np.zeros(m, dtype=bool)
    keep[0] = values[0] > values[1]
    keep[-1] = values[-1] > values[-2]
    if m > 2:
        interior = (values[1:-1] > values[:-2]) & (values[1:-1] > values[2:])
        keep[1:-1] = interior
    return np.nonzero(keep)[0]


def select_peaks(spec: Spectrum, rule: PeakRule) -> PeakSelection:
    """Pick peaks of a spectrum under the given rule.

    Strict local maxima (endpoints qualify against their single neighbor)
    are ranked by descending value, ties broken toward the lower grid index.
    Under ``fixed_k``, missing maxima are topped up with the largest
    non-peak values and the selection is flagged as fallback-filled.
    """
    values = spec.values
    maxima = _strict_local_maxima(values)
    order = maxima[np.argsort(-values[maxima], kind="stable")]
    fallback = False
    if rule.kind == "threshold":
        chosen = order[values[order] > rule.eta]
    else:
        if rule.k > values.size:
            raise ValueError(
                f"cannot select {rule.k} peaks from {values.size} grid points")
        if order.size >= rule.k:
            chosen = order[: rule.k]
        else:
            fallback = True
            rest = np.setdiff1d(np.arange(values.size), order,
                                assume_unique=True)
            rest = rest[np.argsort(-values[rest], kind="stable")]
            fill = rest[: rule.k - order.size]
            chosen = np.concatenate([order, fill])
            chosen = chosen[np.argsort(-values[chosen], kind="stable")]
    return PeakSelection(
        rule=rule,
        indices=chosen,
        angles=spec.grid.values[chosen],
        fallback_filled=fallback,
    )
