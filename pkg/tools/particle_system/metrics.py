"""Wasserstein distances, norms of stochastic grid processes and scheme residuals.

L^q norms over randomness are Monte Carlo estimates over the replicates of a
sample. The ``estimate_*`` variants attach a bootstrap standard error obtained by
resampling replicates.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from tools.particle_system import config
from tools.particle_system.grid_noise import NoiseBundle
from tools.particle_system.model import ModelSpec, ParticleEnsemble
from tools.particle_system.schemes import Trajectory, euler_increment, milstein_increment

logger = logging.getLogger(__name__)

W2_METHODS = ("auto", "sorted", "assignment")


def _as_states(ensemble) -> np.ndarray:
    if isinstance(ensemble, ParticleEnsemble):
        return ensemble.states
    states = np.asarray(ensemble, dtype=float)
    return states[:, None] if states.ndim == 1 else states


def w2(ensemble_a, ensemble_b, method: str = "auto") -> float:
    """Wasserstein-2 distance between two equal-weight empirical measures.

    In one dimension the monotone coupling of the sorted atoms is optimal. In
    higher dimensions the optimal coupling is found by an exact assignment solver,
    which is only attempted for N <= 12 unless ``method="assignment"`` is given.

    Args:
        ensemble_a: ParticleEnsemble or [N, d] array.
        ensemble_b: ParticleEnsemble or [N, d] array.
        method: "auto", "sorted" (d = 1 only) or "assignment".

    Returns:
        float: The distance, non-negative.

    Raises:
        ValueError: On dimension or size mismatch, or an unsupported size.
    """
    a, b = _as_states(ensemble_a), _as_states(ensemble_b)
    if method not in W2_METHODS:
        raise ValueError(f"Unknown W2 method '{method}'. Expected one of {W2_METHODS}")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"Dimension mismatch between ensembles {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(
            f"Ensembles must have the same size, got {a.shape[0]} and {b.shape[0]}"
        )
    d, N = a.shape[1], a.shape[0]

    if method == "sorted" or (method == "auto" and d == 1):
        if d != 1:
            raise ValueError("Sorted coupling is only optimal in one dimension")
        gaps = np.sort(a[:, 0]) - np.sort(b[:, 0])
        return float(np.sqrt(np.mean(gaps * gaps)))

    if method == "auto" and N > config.EXACT_ASSIGNMENT_MAX_PARTICLES:
        raise ValueError(
            f"Exact W2 for d={d} is limited to N <= {config.EXACT_ASSIGNMENT_MAX_PARTICLES}; "
            "pass method='assignment' to solve larger instances"
        )
    cost = cdist(a, b, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


@dataclass(frozen=True, eq=False)
class GridProcessSample:
    """Replicated values of a stochastic grid process.

    Attributes:
        values: Array [M, N, n_steps + 1, d] indexed by replicate, particle, grid
            index and component.
        q: Exponent of the L^q norm over randomness, at least 2.
    """

    values: np.ndarray
    q: float = config.DEFAULT_NORM_EXPONENT

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 4:
            raise ValueError(
                f"Grid process values must be [M, N, n + 1, d], got shape {values.shape}"
            )
        if values.shape[0] < 1 or values.shape[1] < 1 or values.shape[2] < 1:
            raise ValueError("Grid process sample is empty")
        if self.q < 2:
            raise ValueError(f"Norm exponent q must be at least 2, got {self.q}")
        object.__setattr__(self, "values", values)

    @property
    def M(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormEstimate:
    """Monte Carlo norm estimate with its bootstrap standard error."""

    estimate: float
    std_error: float
    replicates: int


def stack_samples(samples: Iterable[GridProcessSample]) -> GridProcessSample:
    """Combine samples with the same shape and exponent along the replicate axis."""
    samples = list(samples)
    if not samples:
        raise ValueError("No samples to stack")
    q = samples[0].q
    if any(s.q != q for s in samples):
        raise ValueError("Samples use different norm exponents")
    if any(s.values.shape[1:] != samples[0].values.shape[1:] for s in samples):
        raise ValueError("Samples have inconsistent particle, grid or state dimensions")
    return GridProcessSample(np.concatenate([s.values for s in samples], axis=0), q)


def lq_particle_max(per_replicate: np.ndarray, q: float) -> float:
    """max_i (mean_r v[r, i]^q)^(1/q) for non-negative per-replicate values v."""
    moments = np.mean(np.power(per_replicate, q), axis=0)
    return float(np.max(np.power(moments, 1.0 / q)))


def path_maxima(sample: GridProcessSample) -> np.ndarray:
    """Per replicate and particle, max_j |Y_j|, as an [M, N] array."""
    return np.linalg.norm(sample.values, axis=3).max(axis=2)


def spijker_parts(sample: GridProcessSample) -> Tuple[np.ndarray, np.ndarray]:
    """Per replicate and particle, |Y_0| and max_{j>=1} |sum_{k<=j} Y_k|."""
    initial = np.linalg.norm(sample.values[:, :, 0], axis=2)
    if sample.values.shape[2] == 1:
        return initial, np.zeros_like(initial)
    partial_sums = np.cumsum(sample.values[:, :, 1:], axis=2)
    return initial, np.linalg.norm(partial_sums, axis=3).max(axis=2)


def grid_sup_norm(sample: GridProcessSample) -> float:
    """max_i || max_j |Y_j^i| ||_{L^q}, estimated over the replicates."""
    return lq_particle_max(path_maxima(sample), sample.q)


def spijker_norm(sample: GridProcessSample) -> float:
    """max_i ||Y_0^i||_q + max_i || max_{j>=1} |sum_{k=1..j} Y_k^i| ||_q."""
    initial, partial = spijker_parts(sample)
    return lq_particle_max(initial, sample.q) + lq_particle_max(partial, sample.q)


def bootstrap_indices(
    replicates: int, resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES, seed: int = 0
) -> np.ndarray:
    """Replicate indices for ``resamples`` bootstrap draws, [resamples, replicates]."""
    generator = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0, config.STREAM_BOOTSTRAP)))
    )
    return generator.integers(0, replicates, size=(resamples, replicates))


def _standard_error(estimates: np.ndarray) -> float:
    if estimates.size < 2:
        return 0.0
    return float(np.std(estimates, ddof=1))


def estimate_grid_sup_norm(
    sample: GridProcessSample,
    resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES,
    seed: int = 0,
) -> NormEstimate:
    """grid_sup_norm with a bootstrap standard error over replicates."""
    maxima = path_maxima(sample)
    estimates = np.array(
        [lq_particle_max(maxima[index], sample.q) for index in bootstrap_indices(sample.M, resamples, seed)]
    )
    return NormEstimate(grid_sup_norm(sample), _standard_error(estimates), sample.M)


def estimate_spijker_norm(
    sample: GridProcessSample,
    resamples: int = config.DEFAULT_BOOTSTRAP_RESAMPLES,
    seed: int = 0,
) -> NormEstimate:
    """spijker_norm with a bootstrap standard error over replicates."""
    initial, partial = spijker_parts(sample)
    estimates = np.array(
        [
            lq_particle_max(initial[index], sample.q) + lq_particle_max(partial[index], sample.q)
            for index in bootstrap_indices(sample.M, resamples, seed)
        ]
    )
    return NormEstimate(spijker_norm(sample), _standard_error(estimates), sample.M)


def residuals(
    model: ModelSpec,
    bundle: NoiseBundle,
    trajectory: Trajectory,
    initial: Optional[np.ndarray] = None,
    mode: Optional[str] = None,
    scheme: Optional[str] = None,
    q: float = config.DEFAULT_NORM_EXPONENT,
) -> GridProcessSample:
    """Pointwise residuals of a grid process inserted into the scheme.

    R_0 = Y_0 - X_0 and R_j = Y_j - Y_{j-1} - Gamma_j(Y_{j-1}), where Gamma_j is the
    scheme increment rebuilt from the bundle's stored eta_j and increments. On the
    scheme's own output every residual is exactly zero.

    Args:
        model: Model coefficients.
        bundle: Noise on the trajectory's grid.
        trajectory: The grid process Y.
        initial: Initial ensemble X_0; defaults to Y_0.
        mode: Milstein mode; defaults to the trajectory's mode.
        scheme: "milstein" or "euler"; defaults to the trajectory's scheme.
        q: Exponent carried by the returned sample.

    Returns:
        GridProcessSample: A single-replicate sample of R.

    Raises:
        ValueError: If the trajectory and bundle grids differ.
    """
    if not trajectory.grid.same_as(bundle.grid):
        raise ValueError("Trajectory and noise bundle live on different grids")
    scheme = scheme or trajectory.scheme
    mode = mode or trajectory.mode
    frames = trajectory.frames
    values = np.empty_like(frames)
    values[0] = frames[0] - (frames[0] if initial is None else np.asarray(initial, dtype=float))

    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(1, bundle.n_steps + 1):
            previous = frames[j - 1]
            if scheme == "euler":
                increment = euler_increment(model, bundle, j, previous)
            else:
                increment, _ = milstein_increment(model, bundle, j, previous, mode)
            values[j] = frames[j] - (previous + increment)
    return GridProcessSample(values.transpose(1, 0, 2)[None], q)
