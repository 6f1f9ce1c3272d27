"""Time grids, reproducible coupled Brownian noise and iterated stochastic integrals.

This module provides the temporal mesh of the schemes and the noise they consume.
Every random number is drawn from a Philox counter-based generator keyed by
(seed, replicate, stream, level, index), so a bundle is a pure function of its
keys and does not depend on evaluation order or the number of workers.

Brownian increments are stored at two resolutions: each coarse step j holds K
fine sub-increments with variance h_j / K, and the coarse increment is their sum.
The fine sub-increments serve three purposes:
    - the increment up to the randomised point t_{j-1} + eta_j h_j (Brownian bridge
      against the fine path),
    - subsampled approximations of Levy-type iterated integrals,
    - coupling of coarse grids to a fine reference path (``coarsen``).

Step indices are 1-based throughout: step j covers [t_{j-1}, t_j].
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from tools.particle_system import config

logger = logging.getLogger(__name__)

_RELATIVE_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Temporal mesh 0 = t_0 < t_1 < ... < t_n = T.

    Attributes:
        times: Strictly increasing grid points, read-only.

    Raises:
        ValueError: If the points do not start at 0, are not strictly increasing
            or the largest step exceeds min(1, T).
    """

    times: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("A time grid needs at least two points")
        if not np.all(np.isfinite(times)):
            raise ValueError("Time grid points must be finite")
        if times[0] != 0.0:
            raise ValueError(f"Time grid must start at 0, got {times[0]}")
        steps = np.diff(times)
        if not np.all(steps > 0):
            raise ValueError("Time grid points must be strictly increasing")
        bound = min(1.0, float(times[-1]))
        if steps.max() > bound * (1.0 + _RELATIVE_TOLERANCE):
            raise ValueError(
                f"Largest step {steps.max()} exceeds min(1, T) = {bound}"
            )
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @cached_property
    def steps(self) -> np.ndarray:
        steps = np.diff(self.times)
        steps.setflags(write=False)
        return steps

    @property
    def h_max(self) -> float:
        return float(self.steps.max())

    def is_uniform(self) -> bool:
        """Check whether all steps are equal up to rounding."""
        return bool(np.allclose(self.steps, self.steps[0], rtol=1e-10, atol=0.0))

    def same_as(self, other: "TimeGrid") -> bool:
        """Check whether two grids have bitwise identical points."""
        return np.array_equal(self.times, other.times)


def make_uniform_grid(T: float, n: int) -> TimeGrid:
    """Build the equidistant grid with n steps on [0, T].

    Args:
        T: Time horizon, positive.
        n: Number of steps, at least 1.

    Returns:
        TimeGrid: n + 1 equidistant points from 0 to T.

    Raises:
        ValueError: If T or n is not positive or T / n > min(1, T).
    """
    if not math.isfinite(T) or T <= 0:
        raise ValueError(f"Time horizon must be positive, got {T}")
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise ValueError(f"Number of steps must be a positive integer, got {n}")
    n = int(n)
    times = T * np.arange(n + 1, dtype=float) / n
    times[-1] = T
    return TimeGrid(times)


def make_grid(times: Sequence[float]) -> TimeGrid:
    """Build a general, possibly non-equidistant, grid from explicit points."""
    return TimeGrid(np.asarray(times, dtype=float))


def default_substeps(h: float) -> int:
    """Default number of fine substeps per step, ceil(1 / h).

    With K >= 1 / h the per-step subsampling error O(h / sqrt(K)) of the iterated
    integrals is O(h^{3/2}), which keeps the global strong order 1.
    """
    return max(1, math.ceil(1.0 / h - _RELATIVE_TOLERANCE))


@dataclass(frozen=True)
class NoiseId:
    """Identifies a driving Brownian motion: a particle's W^i or the common W^0."""

    kind: Literal["particle", "common"]
    index: int = 0

    @classmethod
    def particle(cls, index: int) -> "NoiseId":
        return cls("particle", index)

    @classmethod
    def common(cls) -> "NoiseId":
        return cls("common", 0)


def _generator(seed: int, *key: int) -> np.random.Generator:
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(sequence))


def _check_count(name: str, value: int, minimum: int) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


@dataclass(frozen=True, eq=False)
class NoiseBundle:
    """Coupled multi-resolution Brownian increments plus randomisation uniforms.

    Attributes:
        grid: Coarse time grid.
        n_particles: Number of particles N.
        m1: Dimension of each idiosyncratic noise W^i.
        m0: Dimension of the common noise W^0 (0 when absent).
        substeps: Fine sub-increments K per coarse step.
        particle_increments: Array [n_steps, K, N, m1] of sub-increments of W^i.
        common_increments: Array [n_steps, K, m0] of sub-increments of W^0.
        etas: Uniforms eta_j in (0, 1), one per step, shared by all particles.
        particle_bridge: Standard normals [n_steps, N, m1] for the bridge draw at
            the randomised point.
        common_bridge: Standard normals [n_steps, m0] for the same purpose.
        seed: Master seed.
        replicate: Replicate identifier.
        population: Tag of the idiosyncratic streams; systems with different tags
            share common noise and etas but not idiosyncratic noise.
        eta_level: Coarsening factor relative to the sampled bundle; keys the
            etas and bridge draws.
    """

    grid: TimeGrid
    n_particles: int
    m1: int
    m0: int
    substeps: int
    particle_increments: np.ndarray
    common_increments: np.ndarray
    etas: np.ndarray
    particle_bridge: np.ndarray
    common_bridge: np.ndarray
    seed: int
    replicate: int
    population: int = 0
    eta_level: int = 1

    def __post_init__(self):
        n, K = self.grid.n_steps, self.substeps
        expected = {
            "particle_increments": (n, K, self.n_particles, self.m1),
            "common_increments": (n, K, self.m0),
            "etas": (n,),
            "particle_bridge": (n, self.n_particles, self.m1),
            "common_bridge": (n, self.m0),
        }
        for name, shape in expected.items():
            array = getattr(self, name)
            if array.shape != shape:
                raise ValueError(f"{name} has shape {array.shape}, expected {shape}")
            array.setflags(write=False)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @cached_property
    def _particle_cumulative(self) -> np.ndarray:
        return _cumulative(self.particle_increments)

    @cached_property
    def _common_cumulative(self) -> np.ndarray:
        return _cumulative(self.common_increments)

    @cached_property
    def particle_coarse(self) -> np.ndarray:
        """Coarse increments [n_steps, N, m1]; the sum of the K sub-increments."""
        return self._particle_cumulative[:, -1]

    @cached_property
    def common_coarse(self) -> np.ndarray:
        """Coarse increments [n_steps, m0]."""
        return self._common_cumulative[:, -1]

    @cached_property
    def particle_partial(self) -> np.ndarray:
        """Increments W^i_{t_{j-1} + eta_j h_j} - W^i_{t_{j-1}}, [n_steps, N, m1]."""
        return self._partial(
            self.particle_increments, self._particle_cumulative, self.particle_bridge
        )

    @cached_property
    def common_partial(self) -> np.ndarray:
        """Increments of W^0 up to the randomised point, [n_steps, m0]."""
        return self._partial(
            self.common_increments, self._common_cumulative, self.common_bridge
        )

    @cached_property
    def particle_path(self) -> np.ndarray:
        """W^i at the grid nodes, [n_steps + 1, N, m1]."""
        return _path(self.particle_coarse)

    @cached_property
    def common_path(self) -> np.ndarray:
        """W^0 at the grid nodes, [n_steps + 1, m0]."""
        return _path(self.common_coarse)

    def _partial(
        self, increments: np.ndarray, cumulative: np.ndarray, bridge: np.ndarray
    ) -> np.ndarray:
        K = self.substeps
        rows = np.arange(self.n_steps)
        position = self.etas * K
        full = np.minimum(np.floor(position).astype(int), K)
        fraction = position - full
        shape = (-1,) + (1,) * (increments.ndim - 2)
        lam = fraction.reshape(shape)
        sub_length = (self.grid.steps / K).reshape(shape)
        left = cumulative[rows, full]
        straddle = increments[rows, np.minimum(full, K - 1)]
        bridge_scale = np.sqrt(lam * (1.0 - lam) * sub_length)
        return left + lam * straddle + bridge_scale * bridge

    def check_step(self, j: int) -> int:
        """Validate a 1-based step index and return the 0-based array row."""
        if isinstance(j, bool) or int(j) != j or not 1 <= j <= self.n_steps:
            raise ValueError(f"Step index {j} outside 1..{self.n_steps}")
        return int(j) - 1

    def sub_increments(self, j: int, noise: NoiseId, component: int) -> np.ndarray:
        """Return the K fine sub-increments of one scalar noise over step j."""
        row = self.check_step(j)
        if noise.kind == "particle":
            if not 0 <= noise.index < self.n_particles:
                raise ValueError(f"Particle index {noise.index} out of range")
            if not 0 <= component < self.m1:
                raise ValueError(f"Component {component} outside 0..{self.m1 - 1}")
            return self.particle_increments[row, :, noise.index, component]
        if not 0 <= component < self.m0:
            raise ValueError(f"Common noise component {component} out of range")
        return self.common_increments[row, :, component]

    def fine_path(self, noise: NoiseId, component: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        """Return one scalar noise on the fine substep grid as (times, values)."""
        if noise.kind == "particle":
            increments = self.particle_increments[:, :, noise.index, component]
        else:
            increments = self.common_increments[:, :, component]
        offsets = np.arange(self.substeps) / self.substeps
        times = (
            self.grid.times[:-1, None] + self.grid.steps[:, None] * offsets[None, :]
        ).ravel()
        times = np.append(times, self.grid.T)
        values = np.concatenate([[0.0], np.cumsum(increments.ravel())])
        return times, values


def _cumulative(increments: np.ndarray) -> np.ndarray:
    zeros = np.zeros_like(increments[:, :1])
    cumulative = np.concatenate([zeros, np.cumsum(increments, axis=1)], axis=1)
    cumulative.setflags(write=False)
    return cumulative


def _path(coarse: np.ndarray) -> np.ndarray:
    zeros = np.zeros_like(coarse[:1])
    path = np.concatenate([zeros, np.cumsum(coarse, axis=0)], axis=0)
    path.setflags(write=False)
    return path


def _draw_etas(seed: int, replicate: int, eta_level: int, n: int) -> np.ndarray:
    etas = _generator(seed, replicate, config.STREAM_ETA, eta_level, 0).random(n)
    # Philox doubles live on [0, 1); zero has probability 2^-53 but is excluded
    return np.where(etas == 0.0, np.nextafter(0.0, 1.0), etas)


def _draw_bridges(
    seed: int,
    replicate: int,
    eta_level: int,
    population: int,
    n: int,
    n_particles: int,
    m1: int,
    m0: int,
) -> Tuple[np.ndarray, np.ndarray]:
    particle = np.empty((n, n_particles, m1))
    for i in range(n_particles):
        generator = _generator(
            seed, replicate, config.STREAM_BRIDGE_PARTICLE, eta_level, population, i
        )
        particle[:, i, :] = generator.standard_normal((n, m1))
    common = _generator(
        seed, replicate, config.STREAM_BRIDGE_COMMON, eta_level, 0
    ).standard_normal((n, m0))
    return particle, common


def sample_noise(
    grid: TimeGrid,
    N: int,
    m1: int,
    m0: int,
    K: int,
    seed: int,
    replicate: int,
    population: int = 0,
) -> NoiseBundle:
    """Sample a fully populated noise bundle.

    Args:
        grid: Coarse time grid.
        N: Number of particles, at least 1.
        m1: Idiosyncratic noise dimension, at least 1.
        m0: Common noise dimension, at least 0.
        K: Fine substeps per step, at least 1.
        seed: Master seed, a non-negative integer.
        replicate: Replicate identifier, a non-negative integer.
        population: Tag of the idiosyncratic streams (see NoiseBundle).

    Returns:
        NoiseBundle: Bundle whose draws are pure functions of the keys.

    Raises:
        ValueError: If a count is out of range.
    """
    N = _check_count("N", N, 1)
    m1 = _check_count("m1", m1, 1)
    m0 = _check_count("m0", m0, 0)
    K = _check_count("K", K, 1)
    seed = _check_count("seed", seed, 0)
    replicate = _check_count("replicate", replicate, 0)
    population = _check_count("population", population, 0)

    n = grid.n_steps
    scale = np.sqrt(grid.steps / K)

    particle = np.empty((n, K, N, m1))
    for i in range(N):
        generator = _generator(seed, replicate, config.STREAM_PARTICLE, population, i)
        particle[:, :, i, :] = generator.standard_normal((n, K, m1))
    particle *= scale[:, None, None, None]

    common = _generator(seed, replicate, config.STREAM_COMMON, 0, 0).standard_normal(
        (n, K, m0)
    )
    common *= scale[:, None, None]

    particle_bridge, common_bridge = _draw_bridges(
        seed, replicate, 1, population, n, N, m1, m0
    )
    return NoiseBundle(
        grid=grid,
        n_particles=N,
        m1=m1,
        m0=m0,
        substeps=K,
        particle_increments=particle,
        common_increments=common,
        etas=_draw_etas(seed, replicate, 1, n),
        particle_bridge=particle_bridge,
        common_bridge=common_bridge,
        seed=seed,
        replicate=replicate,
        population=population,
    )


def sample_initial(
    N: int,
    d: int,
    x0,
    spread: float,
    seed: int,
    replicate: int,
    population: int = 0,
) -> np.ndarray:
    """Sample an initial ensemble X_0^i = x0 + spread * Z^i of shape [N, d]."""
    N = _check_count("N", N, 1)
    d = _check_count("d", d, 1)
    centre = np.broadcast_to(np.asarray(x0, dtype=float), (d,))
    if spread < 0:
        raise ValueError(f"Initial spread must be non-negative, got {spread}")
    states = np.tile(centre, (N, 1))
    if spread > 0:
        generator = _generator(seed, replicate, config.STREAM_INITIAL, population, 0)
        states = states + spread * generator.standard_normal((N, d))
    return states


def internal_increment(bundle: NoiseBundle, j: int, source: NoiseId) -> np.ndarray:
    """Return W_{t_{j-1} + eta_j h_j} - W_{t_{j-1}} for one driving noise.

    The increment is the sum of the fine sub-increments left of the randomised
    point plus a Brownian-bridge draw inside the straddling sub-increment.

    Args:
        bundle: Noise bundle.
        j: 1-based step index.
        source: The driving noise.

    Returns:
        np.ndarray: Vector with m1 (particle) or m0 (common) components.

    Raises:
        ValueError: If j or the noise index is out of range.
    """
    row = bundle.check_step(j)
    if source.kind == "particle":
        if not 0 <= source.index < bundle.n_particles:
            raise ValueError(f"Particle index {source.index} out of range")
        return bundle.particle_partial[row, source.index].copy()
    return bundle.common_partial[row].copy()


def levy_subsample_sum(a_increments: np.ndarray, b_increments: np.ndarray) -> float:
    """Left-point Riemann-Stieltjes sum of int int dA dB over one step.

    Args:
        a_increments: K sub-increments of the inner integrator A.
        b_increments: K sub-increments of the outer integrator B.

    Raises:
        ValueError: If the two paths are not on the same substep grid.
    """
    a_increments = np.asarray(a_increments, dtype=float)
    b_increments = np.asarray(b_increments, dtype=float)
    if a_increments.shape != b_increments.shape or a_increments.ndim != 1:
        raise ValueError("Iterated integral needs both paths on the same substep grid")
    a_before = np.concatenate([[0.0], np.cumsum(a_increments)[:-1]])
    return float(np.dot(a_before, b_increments))


def iterated_integral(
    bundle: NoiseBundle,
    j: int,
    source: Tuple[NoiseId, int],
    target: Tuple[NoiseId, int],
    exact_diagonal: bool = True,
) -> float:
    """Approximate I = int_{t_{j-1}}^{t_j} int_{t_{j-1}}^{s} dA_r dB_s.

    For A = B the exact value ((Delta B)^2 - h_j) / 2 is returned; otherwise the
    subsampled left-point sum over the K fine sub-increments, whose L2 error per
    step is O(h_j / sqrt(K)).

    Args:
        bundle: Noise bundle.
        j: 1-based step index.
        source: (noise, component) of the inner integrator A.
        target: (noise, component) of the outer integrator B.
        exact_diagonal: Use the exact formula when A = B.

    Returns:
        float: The iterated integral.
    """
    a = bundle.sub_increments(j, *source)
    b = bundle.sub_increments(j, *target)
    if exact_diagonal and source == target:
        row = bundle.check_step(j)
        noise, component = target
        if noise.kind == "particle":
            delta = bundle.particle_coarse[row, noise.index, component]
        else:
            delta = bundle.common_coarse[row, component]
        return float(0.5 * (delta * delta - bundle.grid.steps[row]))
    return levy_subsample_sum(a, b)


@dataclass(frozen=True, eq=False)
class IteratedIntegrals:
    """All iterated integrals one step of the Milstein scheme consumes.

    Index convention is [source..., target...]: the first indices name the inner
    integrator A, the last ones the outer integrator B.

    Attributes:
        particle_self: [N, m1, m1], I(W^{i,l1} -> W^{i,l}).
        particle_cross: [N, m1, N, m1], I(W^{k,l1} -> W^{i,l}); None unless
            cross-particle terms were requested.
        common_to_particle: [m0, N, m1], I(W^{0,l1} -> W^{i,l}).
        particle_to_common: [N, m1, m0], I(W^{i,l1} -> W^{0,l}).
        common_common: [m0, m0], I(W^{0,l1} -> W^{0,l}).
    """

    particle_self: np.ndarray
    particle_cross: Optional[np.ndarray]
    common_to_particle: np.ndarray
    particle_to_common: np.ndarray
    common_common: np.ndarray


def iterated_integrals(
    bundle: NoiseBundle, j: int, cross_particle: bool = False
) -> IteratedIntegrals:
    """Compute the blocks of iterated integrals for step j, exact on diagonals."""
    row = bundle.check_step(j)
    h = bundle.grid.steps[row]
    dp = bundle.particle_increments[row]
    dc = bundle.common_increments[row]
    before_p = bundle._particle_cumulative[row, :-1]
    before_c = bundle._common_cumulative[row, :-1]

    exact_p = 0.5 * (bundle.particle_coarse[row] ** 2 - h)
    exact_c = 0.5 * (bundle.common_coarse[row] ** 2 - h)
    components = np.arange(bundle.m1)

    particle_self = np.einsum("kna,knb->nab", before_p, dp)
    particle_self[:, components, components] = exact_p

    particle_cross = None
    if cross_particle:
        particle_cross = np.einsum("kna,kmb->namb", before_p, dp)
        particles = np.arange(bundle.n_particles)
        particle_cross[particles, :, particles, :] = particle_self

    common_common = np.einsum("ka,kb->ab", before_c, dc)
    common_components = np.arange(bundle.m0)
    common_common[common_components, common_components] = exact_c

    return IteratedIntegrals(
        particle_self=particle_self,
        particle_cross=particle_cross,
        common_to_particle=np.einsum("ka,knb->anb", before_c, dp),
        particle_to_common=np.einsum("kna,kb->nab", before_p, dc),
        common_common=common_common,
    )


def coarsen(
    bundle: NoiseBundle, factor: int, substeps: Optional[int] = None
) -> NoiseBundle:
    """Merge groups of ``factor`` steps into one, keeping the Brownian paths.

    The coarse bundle regroups the original sub-increments: by default each
    coarse step keeps all factor * K of them; with ``substeps`` they are summed
    into that many groups. Etas and bridge draws are freshly keyed by the
    cumulative coarsening factor, since the randomised point is scheme-internal.

    Args:
        bundle: Bundle on a uniform grid.
        factor: Number of steps merged into one.
        substeps: Optional number of sub-increments per coarse step; must divide
            factor * K.

    Returns:
        NoiseBundle: Bundle on the coarse grid describing the same paths.

    Raises:
        ValueError: If the factor does not divide the number of steps, the grid
            is not uniform, or ``substeps`` does not divide factor * K.
    """
    factor = _check_count("factor", factor, 1)
    if factor == 1 and substeps in (None, bundle.substeps):
        return bundle
    if not bundle.grid.is_uniform():
        raise ValueError("Only bundles on uniform grids can be coarsened")
    n = bundle.n_steps
    if n % factor:
        raise ValueError(f"Factor {factor} does not divide the {n} steps of the grid")

    merged = factor * bundle.substeps
    particle = bundle.particle_increments.reshape(
        n // factor, merged, bundle.n_particles, bundle.m1
    )
    common = bundle.common_increments.reshape(n // factor, merged, bundle.m0)
    if substeps is not None and substeps != merged:
        substeps = _check_count("substeps", substeps, 1)
        if merged % substeps:
            raise ValueError(
                f"Substeps {substeps} do not divide the {merged} merged sub-increments"
            )
        group = merged // substeps
        particle = particle.reshape(
            n // factor, substeps, group, bundle.n_particles, bundle.m1
        ).sum(axis=2)
        common = common.reshape(n // factor, substeps, group, bundle.m0).sum(axis=2)
        merged = substeps

    grid = make_grid(bundle.grid.times[::factor])
    eta_level = bundle.eta_level * factor
    particle_bridge, common_bridge = _draw_bridges(
        bundle.seed,
        bundle.replicate,
        eta_level,
        bundle.population,
        grid.n_steps,
        bundle.n_particles,
        bundle.m1,
        bundle.m0,
    )
    logger.debug(
        f"Coarsened bundle by {factor}: {grid.n_steps} steps, {merged} substeps"
    )
    return NoiseBundle(
        grid=grid,
        n_particles=bundle.n_particles,
        m1=bundle.m1,
        m0=bundle.m0,
        substeps=merged,
        particle_increments=np.ascontiguousarray(particle),
        common_increments=np.ascontiguousarray(common),
        etas=_draw_etas(bundle.seed, bundle.replicate, eta_level, grid.n_steps),
        particle_bridge=particle_bridge,
        common_bridge=common_bridge,
        seed=bundle.seed,
        replicate=bundle.replicate,
        population=bundle.population,
        eta_level=eta_level,
    )
