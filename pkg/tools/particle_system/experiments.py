"""Monte Carlo studies of the randomised Milstein scheme.

Each study runs M independent replicates. Within a replicate every level is
driven by the same underlying Brownian path: noise is sampled once on the finest
(reference) grid and coarser levels are obtained with ``coarsen``. Replicates
are independent tasks executed on a thread pool with ordered results, and all
randomness is counter-keyed, so a report does not depend on the worker count.

Error bars come from a replicate-level bootstrap that resamples the same
replicates jointly across levels; the slope interval is the 2.5 / 97.5 percent
range of the slopes fitted to the bootstrap error curves.
"""

import logging
import time
from dataclasses import dataclass, field
from multiprocessing.pool import ThreadPool
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from tools.particle_system import config
from tools.particle_system.formatters import report_frame
from tools.particle_system.grid_noise import (
    NoiseBundle,
    NoiseId,
    TimeGrid,
    coarsen,
    default_substeps,
    make_uniform_grid,
    sample_initial,
    sample_noise,
)
from tools.particle_system.metrics import (
    GridProcessSample,
    bootstrap_indices,
    lq_particle_max,
    path_maxima,
    residuals,
    spijker_parts,
    w2,
)
from tools.particle_system.model import ModelSpec
from tools.particle_system.schemes import Trajectory, resolve_mode, simulate

logger = logging.getLogger(__name__)

INTEGRANDS = ("constant", "linear", "sine", "brownian")
CONSISTENCY_REFERENCES = ("fine", "self")

# Per replicate, per level: a tuple of arrays indexed by particle
LevelValues = Tuple[np.ndarray, ...]
Statistic = Callable[[LevelValues], float]


@dataclass(frozen=True)
class LevelRecord:
    """Error estimate at one level (a step size h or a particle count N)."""

    level: float
    error: float
    std_error: float
    replicates: int


@dataclass(frozen=True)
class OrderFit:
    """Least-squares fit of log2(error) against log2(scale).

    Attributes:
        slope: Fitted order.
        residual: Root-mean-square residual of the fit.
        pair_orders: Observed orders between adjacent usable levels.
    """

    slope: float
    residual: float
    pair_orders: List[float]


@dataclass
class StudyReport:
    """Outcome of a study.

    Attributes:
        kind: Study name (convergence, quadrature, consistency, poc, moments).
        records: Per-level estimates, sorted by level.
        slope: Fitted order, None when fewer than three usable levels remain.
        slope_residual: Residual of the fit.
        slope_interval: 95% bootstrap interval of the slope.
        pair_orders: Adjacent-level observed orders.
        wall_clock: Runtime in seconds.
        config: Echo of the study arguments.
        passed: Pass condition of the study.
        diverged_replicates: Replicates with non-finite states at any level.
        details: Study-specific extras.
    """

    kind: str
    records: List[LevelRecord]
    slope: Optional[float] = None
    slope_residual: Optional[float] = None
    slope_interval: Optional[Tuple[float, float]] = None
    pair_orders: List[float] = field(default_factory=list)
    wall_clock: float = 0.0
    config: Dict[str, Any] = field(default_factory=dict)
    passed: bool = True
    diverged_replicates: int = 0
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def levels(self) -> np.ndarray:
        return np.array([r.level for r in self.records])

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.records])

    def to_frame(self) -> pd.DataFrame:
        return report_frame(self)


def _fit(scales: np.ndarray, errors: np.ndarray) -> Optional[OrderFit]:
    usable = np.isfinite(errors) & (errors > 0) & np.isfinite(scales) & (scales > 0)
    if usable.sum() < config.MIN_FIT_LEVELS:
        return None
    x, y = np.log2(scales[usable]), np.log2(errors[usable])
    slope, intercept = np.polyfit(x, y, 1)
    residual = float(np.sqrt(np.mean((slope * x + intercept - y) ** 2)))
    pair_orders = list(np.diff(y) / np.diff(x))
    return OrderFit(float(slope), residual, [float(o) for o in pair_orders])


def fit_order(levels) -> OrderFit:
    """Fit the convergence order to (scale, error) pairs.

    Args:
        levels: Array-like of (scale, error) pairs.

    Returns:
        OrderFit: Slope, residual and adjacent-pair orders.

    Raises:
        ValueError: If fewer than three levels have a positive finite error.
    """
    pairs = np.asarray(levels, dtype=float).reshape(-1, 2)
    order = np.argsort(pairs[:, 0])
    scales, errors = pairs[order, 0], pairs[order, 1]
    excluded = ~(np.isfinite(errors) & (errors > 0))
    if excluded.any():
        logger.warning(
            f"Excluding {int(excluded.sum())} level(s) with non-positive error "
            f"from the order fit: {scales[excluded].tolist()}"
        )
    result = _fit(scales, errors)
    if result is None:
        raise ValueError(
            f"Order fit needs at least {config.MIN_FIT_LEVELS} levels with positive error"
        )
    return result


def _run_replicates(
    task: Callable[[int], Any], M: int, workers: int, kind: str, show_progress: bool
) -> List[Any]:
    progress = dict(total=M, desc=kind, disable=not show_progress)
    if workers <= 1:
        return [task(r) for r in tqdm(range(M), **progress)]
    with ThreadPool(processes=workers) as pool:
        return list(tqdm(pool.imap(task, range(M)), **progress))


def _nested_levels(
    T: float, h_levels: Sequence[float], base: float
) -> Tuple[TimeGrid, np.ndarray, np.ndarray]:
    """Return the base grid plus the sorted levels and their coarsening factors."""
    levels = np.sort(np.asarray(h_levels, dtype=float))
    if levels.size == 0 or np.any(levels <= 0):
        raise ValueError(f"Step-size levels must be positive, got {list(h_levels)}")
    if np.unique(levels).size != levels.size:
        raise ValueError(f"Step-size levels must be distinct, got {list(h_levels)}")
    n_base = T / base
    if abs(n_base - round(n_base)) > 1e-9 * n_base:
        raise ValueError(f"Reference step {base} does not divide T = {T}")
    n_base = int(round(n_base))
    factors = []
    for h in levels:
        ratio = h / base
        factor = int(round(ratio))
        if factor < 1 or abs(ratio - factor) > 1e-9 * ratio:
            raise ValueError(f"Step-size level {h} is not a multiple of h_ref = {base}")
        if n_base % factor:
            raise ValueError(f"Step-size level {h} does not divide T = {T}")
        factors.append(factor)
    return make_uniform_grid(T, n_base), levels, np.array(factors)


def _check_replicates(M: int) -> None:
    if M < 2:
        raise ValueError(f"Studies need at least 2 replicates, got M = {M}")


def _base_substeps(levels: np.ndarray, factors: np.ndarray) -> int:
    # every level gets at least ceil(1/h) sub-increments after coarsening
    return int(max(-(-default_substeps(h) // f) for h, f in zip(levels, factors)))


def _reference_frames(
    model: ModelSpec,
    bundle: NoiseBundle,
    initial: np.ndarray,
    scheme: str,
    mode: Optional[str],
) -> Tuple[np.ndarray, bool]:
    if model.closed_form is not None:
        frames = np.stack(
            [
                model.closed_form(t, initial, bundle.particle_path[k], bundle.common_path[k])
                for k, t in enumerate(bundle.grid.times)
            ]
        )
        return frames, not np.all(np.isfinite(frames))
    trajectory = simulate(model, bundle.grid, bundle, initial, scheme, mode)
    return trajectory.frames, trajectory.diverged


def _summarise(
    kind: str,
    levels: np.ndarray,
    outputs: List[Tuple[List[LevelValues], bool]],
    statistic: Statistic,
    seed: int,
    resamples: int,
    fit: bool = True,
) -> StudyReport:
    """Aggregate per-replicate outputs into a report with bootstrap error bars."""
    diverged = np.array([flag for _, flag in outputs])
    kept = [values for values, flag in outputs if not flag]
    n_levels = levels.size
    if diverged.any():
        logger.warning(
            f"{kind}: {int(diverged.sum())} of {diverged.size} replicates diverged "
            "and are excluded from the estimates"
        )

    if not kept:
        errors = np.full(n_levels, np.nan)
        std_errors = np.full(n_levels, np.nan)
        boot = None
    else:
        per_level = [
            tuple(np.stack([values[k][c] for values in kept]) for c in range(len(kept[0][k])))
            for k in range(n_levels)
        ]
        errors = np.array([statistic(v) for v in per_level])
        boot = np.array(
            [
                [statistic(tuple(a[index] for a in v)) for v in per_level]
                for index in bootstrap_indices(len(kept), resamples, seed)
            ]
        )
        std_errors = boot.std(axis=0, ddof=1) if len(kept) > 1 else np.zeros(n_levels)

    records = [
        LevelRecord(float(levels[k]), float(errors[k]), float(std_errors[k]), len(kept))
        for k in range(n_levels)
    ]
    for record in records:
        logger.debug(f"{kind}: level {record.level:g} error {record.error:.6g} +- {record.std_error:.2g}")

    report = StudyReport(kind=kind, records=records, diverged_replicates=int(diverged.sum()))
    if not fit:
        return report
    excluded = ~(np.isfinite(errors) & (errors > 0))
    if excluded.any() and not excluded.all():
        logger.warning(
            f"{kind}: excluding level(s) {levels[excluded].tolist()} with non-positive "
            "error from the order fit"
        )
    fitted = _fit(levels, errors)
    if fitted is None:
        logger.info(f"{kind}: fewer than {config.MIN_FIT_LEVELS} usable levels, slope undefined")
        return report
    report.slope = fitted.slope
    report.slope_residual = fitted.residual
    report.pair_orders = fitted.pair_orders
    if boot is not None and len(kept) > 1:
        slopes = [f.slope for f in (_fit(levels, row) for row in boot) if f is not None]
        if slopes:
            low, high = np.percentile(slopes, [2.5, 97.5])
            report.slope_interval = (float(low), float(high))
    return report


def _finish(
    report: StudyReport,
    started: float,
    echo: Dict[str, Any],
    slope_window: Optional[Tuple[float, float]],
) -> StudyReport:
    report.wall_clock = time.perf_counter() - started
    report.config = echo
    passed = report.diverged_replicates == 0
    if slope_window is not None:
        low, high = slope_window
        passed = passed and report.slope is not None and low <= report.slope <= high
    report.passed = bool(passed and report.passed)
    slope = "undefined" if report.slope is None else f"{report.slope:.3f}"
    logger.info(
        f"Finished {report.kind} study in {report.wall_clock:.1f}s: slope {slope}, "
        f"passed={report.passed}"
    )
    return report


def _model_echo(model: ModelSpec) -> Dict[str, Any]:
    return {"model": model.name, "params": dict(model.params)}


def strong_convergence_study(
    model: ModelSpec,
    T: float,
    N: int,
    h_levels: Sequence[float],
    M: int,
    seed: int,
    h_ref: Optional[float] = None,
    scheme: str = "milstein",
    mode: Optional[str] = None,
    q: float = config.DEFAULT_NORM_EXPONENT,
    x0=1.0,
    x0_spread: float = 0.0,
    substeps: Optional[int] = None,
    workers: int = 1,
    resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES,
    slope_window: Optional[Tuple[float, float]] = None,
    show_progress: bool = False,
) -> StudyReport:
    """Estimate the strong error max_i || max_j |X_ref(t_j) - X_j| ||_q per step size.

    The reference is the model's closed form on the shared Brownian path when one
    is attached, otherwise the same scheme on the coupled grid with step h_ref.

    Args:
        model: Model coefficients.
        T: Time horizon.
        N: Number of particles.
        h_levels: Step sizes; each must be a multiple of the reference step.
        M: Number of replicates, at least 2.
        seed: Master seed.
        h_ref: Reference step; defaults to min(h_levels) with a closed form.
        scheme: "milstein" or "euler".
        mode: Milstein mode.
        q: Norm exponent.
        x0: Initial state (scalar or d-vector).
        x0_spread: Standard deviation of the initial ensemble around x0.
        substeps: Sub-increments per reference step; by default chosen so that
            each level has at least ceil(1/h) sub-increments per step.
        workers: Worker threads for the replicates.
        resamples: Bootstrap resamples.
        slope_window: Optional (low, high) pass window for the slope.
        show_progress: Show a progress bar.

    Returns:
        StudyReport: Errors per level with the fitted order.

    Raises:
        ValueError: If the levels are not nested or M < 2.
    """
    _check_replicates(M)
    if h_ref is None:
        if model.closed_form is None:
            raise ValueError("A reference step h_ref is required for models without a closed form")
        h_ref = float(np.min(h_levels))
    base_grid, levels, factors = _nested_levels(T, h_levels, h_ref)
    K = substeps or _base_substeps(levels, factors)
    resolve_mode(model, N, mode)
    logger.info(
        f"Starting convergence study: model {model.name}, scheme {scheme}, N={N}, M={M}, "
        f"levels {levels.tolist()}, h_ref={h_ref}"
    )
    started = time.perf_counter()

    def replicate(r: int):
        bundle = sample_noise(base_grid, N, model.m1, model.m0, K, seed, r)
        initial = sample_initial(N, model.d, x0, x0_spread, seed, r)
        reference, diverged = _reference_frames(model, bundle, initial, scheme, mode)
        values = []
        for factor in factors:
            coarse = coarsen(bundle, int(factor))
            trajectory = simulate(model, coarse.grid, coarse, initial, scheme, mode)
            diverged = diverged or trajectory.diverged
            gap = reference[::factor] - trajectory.frames
            values.append((np.linalg.norm(gap, axis=2).max(axis=0),))
        return values, diverged

    outputs = _run_replicates(replicate, M, workers, "convergence", show_progress)
    report = _summarise(
        "convergence",
        levels,
        outputs,
        lambda v: lq_particle_max(v[0], q),
        seed,
        resamples,
    )
    echo = dict(
        _model_echo(model),
        T=T,
        N=N,
        h_levels=levels.tolist(),
        h_ref=h_ref,
        M=M,
        seed=seed,
        scheme=scheme,
        mode=mode,
        q=q,
        K=K,
    )
    return _finish(report, started, echo, slope_window)


def _integrand_values(
    integrand: str, nodes: np.ndarray, fine: Optional[Tuple[np.ndarray, np.ndarray]]
) -> np.ndarray:
    if integrand == "constant":
        return np.ones_like(nodes)
    if integrand == "linear":
        return nodes
    if integrand == "sine":
        return np.sin(nodes)
    return np.interp(nodes, *fine)


def _exact_integrals(
    integrand: str,
    grid: TimeGrid,
    fine: Optional[Tuple[np.ndarray, np.ndarray]],
    fine_per_step: int,
) -> np.ndarray:
    """Integral of V over [0, t_n] for n = 1..n_steps."""
    left, right = grid.times[:-1], grid.times[1:]
    if integrand == "constant":
        return np.cumsum(grid.steps)
    if integrand == "linear":
        return np.cumsum(0.5 * (right * right - left * left))
    if integrand == "sine":
        return np.cumsum(np.cos(left) - np.cos(right))
    times, values = fine
    trapezoids = np.concatenate([[0.0], np.cumsum(np.diff(times) * 0.5 * (values[:-1] + values[1:]))])
    return trapezoids[fine_per_step * np.arange(1, grid.n_steps + 1)]


def quadrature_study(
    integrand: str,
    T: float,
    h_levels: Sequence[float],
    M: int,
    seed: int,
    q: float = config.DEFAULT_NORM_EXPONENT,
    workers: int = 1,
    resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES,
    slope_window: Optional[Tuple[float, float]] = None,
    show_progress: bool = False,
) -> StudyReport:
    """Estimate the error of the randomised Riemann sum per step size.

    The randomised sum Theta_n = sum_{j<=n} h_j V(t_{j-1} + eta_j h_j) is compared
    with the exact integral over [0, t_n]; the error is the L^q norm of the
    maximum over n. The expected order is alpha + 1/2 for a V of Hoelder class alpha.

    Args:
        integrand: "constant" (V = 1), "linear" (V(s) = s), "sine" (V(s) = sin s)
            or "brownian" (a Brownian path, piecewise linear on a fine grid with
            64 points per finest step).
        T: Time horizon.
        h_levels: Nested step sizes.
        M: Replicates, at least 2.
        seed: Master seed.
        q: Norm exponent.
        workers: Worker threads.
        resamples: Bootstrap resamples.
        slope_window: Optional pass window for the slope.
        show_progress: Show a progress bar.

    Returns:
        StudyReport: Errors per level with the fitted order.
    """
    if integrand not in INTEGRANDS:
        raise ValueError(f"Unknown integrand '{integrand}'. Expected one of {INTEGRANDS}")
    _check_replicates(M)
    h_min = float(np.min(h_levels))
    base_grid, levels, factors = _nested_levels(T, h_levels, h_min)
    K = config.QUADRATURE_FINE_SUBSTEPS if integrand == "brownian" else 1
    logger.info(f"Starting quadrature study: integrand {integrand}, M={M}, levels {levels.tolist()}")
    started = time.perf_counter()

    def replicate(r: int):
        bundle = sample_noise(base_grid, 1, 1, 0, K, seed, r)
        fine = bundle.fine_path(NoiseId.particle(0)) if integrand == "brownian" else None
        values = []
        for factor in factors:
            coarse = coarsen(bundle, int(factor))
            grid = coarse.grid
            nodes = grid.times[:-1] + coarse.etas * grid.steps
            randomised = np.cumsum(grid.steps * _integrand_values(integrand, nodes, fine))
            exact = _exact_integrals(integrand, grid, fine, int(factor) * K)
            values.append((np.array([np.max(np.abs(randomised - exact))]),))
        return values, False

    outputs = _run_replicates(replicate, M, workers, "quadrature", show_progress)
    report = _summarise(
        "quadrature", levels, outputs, lambda v: lq_particle_max(v[0], q), seed, resamples
    )
    echo = dict(
        integrand=integrand, T=T, h_levels=levels.tolist(), M=M, seed=seed, q=q
    )
    return _finish(report, started, echo, slope_window)


def consistency_study(
    model: ModelSpec,
    T: float,
    N: int,
    h_levels: Sequence[float],
    h_ref: float,
    M: int,
    seed: int,
    reference: str = "fine",
    scheme: str = "milstein",
    mode: Optional[str] = None,
    q: float = config.DEFAULT_NORM_EXPONENT,
    x0=1.0,
    x0_spread: float = 0.0,
    substeps: Optional[int] = None,
    workers: int = 1,
    resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES,
    slope_window: Optional[Tuple[float, float]] = None,
    show_progress: bool = False,
) -> StudyReport:
    """Estimate the Spijker norm of the residuals of the reference solution.

    The reference at the coarse nodes (closed form, or the scheme at h_ref on the
    coupled path) is inserted into the coarse scheme and the residuals are
    measured in the Spijker norm. With ``reference="self"`` the coarse scheme's
    own output is inserted instead, so every residual is zero.

    Args:
        model: Model coefficients.
        T: Time horizon.
        N: Number of particles.
        h_levels: Step sizes, multiples of h_ref.
        h_ref: Reference step.
        M: Replicates, at least 2.
        seed: Master seed.
        reference: "fine" or "self".
        scheme: Scheme whose residual map is evaluated.
        mode: Milstein mode.
        q: Norm exponent.
        x0: Initial state.
        x0_spread: Spread of the initial ensemble.
        substeps: Sub-increments per reference step.
        workers: Worker threads.
        resamples: Bootstrap resamples.
        slope_window: Optional pass window for the slope.
        show_progress: Show a progress bar.

    Returns:
        StudyReport: Residual norms per level with the fitted order.
    """
    if reference not in CONSISTENCY_REFERENCES:
        raise ValueError(
            f"Unknown reference '{reference}'. Expected one of {CONSISTENCY_REFERENCES}"
        )
    _check_replicates(M)
    base_grid, levels, factors = _nested_levels(T, h_levels, h_ref)
    K = substeps or _base_substeps(levels, factors)
    resolved = resolve_mode(model, N, mode) if scheme == "milstein" else None
    logger.info(
        f"Starting consistency study: model {model.name}, reference {reference}, N={N}, "
        f"M={M}, levels {levels.tolist()}, h_ref={h_ref}"
    )
    started = time.perf_counter()

    def replicate(r: int):
        bundle = sample_noise(base_grid, N, model.m1, model.m0, K, seed, r)
        initial = sample_initial(N, model.d, x0, x0_spread, seed, r)
        diverged = False
        if reference == "fine":
            fine, diverged = _reference_frames(model, bundle, initial, scheme, resolved)
        values = []
        for factor in factors:
            coarse = coarsen(bundle, int(factor))
            if reference == "fine":
                inserted = Trajectory(coarse.grid, fine[::factor], scheme, resolved)
            else:
                inserted = simulate(model, coarse.grid, coarse, initial, scheme, resolved)
                diverged = diverged or inserted.diverged
            sample = residuals(model, coarse, inserted, initial=initial, q=q)
            initial_part, partial = spijker_parts(sample)
            values.append((initial_part[0], partial[0]))
        return values, diverged

    outputs = _run_replicates(replicate, M, workers, "consistency", show_progress)
    report = _summarise(
        "consistency",
        levels,
        outputs,
        lambda v: lq_particle_max(v[0], q) + lq_particle_max(v[1], q),
        seed,
        resamples,
    )
    echo = dict(
        _model_echo(model),
        T=T,
        N=N,
        h_levels=levels.tolist(),
        h_ref=h_ref,
        M=M,
        seed=seed,
        reference=reference,
        scheme=scheme,
        mode=resolved,
        q=q,
        K=K,
    )
    return _finish(report, started, echo, slope_window)


def poc_study(
    model: ModelSpec,
    T: float,
    h: float,
    N_levels: Sequence[int],
    N_ref: int,
    M: int,
    seed: int,
    independent_reference: bool = True,
    scheme: str = "milstein",
    mode: Optional[str] = None,
    x0=1.0,
    x0_spread: float = 0.0,
    substeps: Optional[int] = None,
    workers: int = 1,
    resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES,
    show_progress: bool = False,
) -> StudyReport:
    """Compare terminal empirical measures of N-particle systems with a larger one.

    Within a replicate every system shares the common noise and the etas; the
    reference system of N_ref particles has its own idiosyncratic noise and
    initial states unless ``independent_reference`` is False. The error at each N
    is the replicate mean of W2 between the terminal measures, where each atom
    of the N-system is repeated N_ref / N times.

    Args:
        model: Model coefficients.
        T: Time horizon.
        h: Step size.
        N_levels: Particle counts; each must divide N_ref.
        N_ref: Size of the reference system, at least max(N_levels).
        M: Replicates, at least 2.
        seed: Master seed.
        independent_reference: Draw the reference system from its own streams.
        scheme: "milstein" or "euler".
        mode: Milstein mode.
        x0: Initial state.
        x0_spread: Spread of the initial ensembles.
        substeps: Sub-increments per step, default ceil(1/h).
        workers: Worker threads.
        resamples: Bootstrap resamples.
        show_progress: Show a progress bar.

    Returns:
        StudyReport: Mean W2 per N; ``details["monotone_decrease"]`` flags a
        strictly decreasing sequence, which is the pass condition.
    """
    _check_replicates(M)
    counts = np.sort(np.asarray(N_levels, dtype=int))
    if counts.size == 0 or counts[0] < 1 or np.unique(counts).size != counts.size:
        raise ValueError(f"Particle levels must be distinct positive integers, got {list(N_levels)}")
    if N_ref < counts[-1]:
        raise ValueError(f"N_ref = {N_ref} is smaller than the largest level {counts[-1]}")
    for count in counts:
        if N_ref % count:
            raise ValueError(f"Particle level {count} does not divide N_ref = {N_ref}")
    n = T / h
    if abs(n - round(n)) > 1e-9 * n:
        raise ValueError(f"Step size {h} does not divide T = {T}")
    grid = make_uniform_grid(T, int(round(n)))
    K = substeps or default_substeps(h)
    population = 1 if independent_reference else 0
    logger.info(
        f"Starting poc study: model {model.name}, N levels {counts.tolist()}, N_ref={N_ref}, M={M}"
    )
    started = time.perf_counter()

    def terminal(count: int, r: int, tag: int) -> Tuple[np.ndarray, bool]:
        bundle = sample_noise(grid, count, model.m1, model.m0, K, seed, r, population=tag)
        initial = sample_initial(count, model.d, x0, x0_spread, seed, r, population=tag)
        trajectory = simulate(model, grid, bundle, initial, scheme, mode)
        return trajectory.terminal, trajectory.diverged

    def replicate(r: int):
        reference, diverged = terminal(N_ref, r, population)
        values = []
        for count in counts:
            states, flag = terminal(int(count), r, 0)
            diverged = diverged or flag
            if diverged:
                values.append((np.array([np.nan]),))
                continue
            repeated = np.repeat(states, N_ref // count, axis=0)
            values.append((np.array([w2(repeated, reference, method="assignment" if model.d > 1 else "auto")]),))
        return values, diverged

    outputs = _run_replicates(replicate, M, workers, "poc", show_progress)
    report = _summarise(
        "poc", counts.astype(float), outputs, lambda v: float(np.mean(v[0])), seed, resamples
    )
    errors = report.errors
    monotone = bool(np.all(np.isfinite(errors)) and np.all(np.diff(errors) < 0))
    report.details["monotone_decrease"] = monotone
    report.passed = monotone
    echo = dict(
        _model_echo(model),
        T=T,
        h=h,
        N_levels=counts.tolist(),
        N_ref=N_ref,
        M=M,
        seed=seed,
        independent_reference=independent_reference,
        scheme=scheme,
        mode=mode,
        K=K,
    )
    return _finish(report, started, echo, None)


def moment_stability_check(
    model: ModelSpec,
    T: float,
    N: int,
    h_levels: Sequence[float],
    M: int,
    seed: int,
    p: float = 2.0,
    scheme: str = "milstein",
    mode: Optional[str] = None,
    x0=1.0,
    x0_spread: float = 0.0,
    substeps: Optional[int] = None,
    workers: int = 1,
    resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES,
    show_progress: bool = False,
) -> StudyReport:
    """Estimate max_i || max_j |X_j^i| ||_p for each step size.

    Passes when every estimate is finite, no replicate diverged and the estimates
    vary by less than 20% across the levels (max / min - 1 < 0.2). Divergence is
    reported, never raised.

    Args:
        model: Model coefficients.
        T: Time horizon.
        N: Number of particles.
        h_levels: Nested step sizes.
        M: Replicates, at least 2.
        seed: Master seed.
        p: Moment exponent, at least 2.
        scheme: "milstein" or "euler".
        mode: Milstein mode.
        x0: Initial state.
        x0_spread: Spread of the initial ensemble.
        substeps: Sub-increments per finest step.
        workers: Worker threads.
        resamples: Bootstrap resamples.
        show_progress: Show a progress bar.

    Returns:
        StudyReport: Moment estimates per level; ``details["variation"]`` holds
        max / min - 1.
    """
    if p < 2:
        raise ValueError(f"Moment exponent p must be at least 2, got {p}")
    _check_replicates(M)
    h_min = float(np.min(h_levels))
    base_grid, levels, factors = _nested_levels(T, h_levels, h_min)
    K = substeps or _base_substeps(levels, factors)
    logger.info(
        f"Starting moments check: model {model.name}, N={N}, M={M}, levels {levels.tolist()}"
    )
    started = time.perf_counter()

    def replicate(r: int):
        bundle = sample_noise(base_grid, N, model.m1, model.m0, K, seed, r)
        initial = sample_initial(N, model.d, x0, x0_spread, seed, r)
        values, diverged = [], False
        for factor in factors:
            coarse = coarsen(bundle, int(factor))
            trajectory = simulate(model, coarse.grid, coarse, initial, scheme, mode)
            diverged = diverged or trajectory.diverged
            sample = GridProcessSample(trajectory.frames.transpose(1, 0, 2)[None], p)
            values.append((path_maxima(sample)[0],))
        return values, diverged

    outputs = _run_replicates(replicate, M, workers, "moments", show_progress)
    report = _summarise(
        "moments", levels, outputs, lambda v: lq_particle_max(v[0], p), seed, resamples, fit=False
    )
    errors = report.errors
    finite = bool(np.all(np.isfinite(errors)))
    variation = float(errors.max() / errors.min() - 1.0) if finite and errors.min() > 0 else float("inf")
    report.details["variation"] = variation
    report.passed = finite and variation < config.MOMENT_VARIATION_TOLERANCE
    if not report.passed:
        logger.warning(f"moments: estimates unstable across step sizes (variation {variation:.3g})")
    echo = dict(
        _model_echo(model),
        T=T,
        N=N,
        h_levels=levels.tolist(),
        M=M,
        seed=seed,
        p=p,
        scheme=scheme,
        mode=mode,
        K=K,
    )
    return _finish(report, started, echo, None)
