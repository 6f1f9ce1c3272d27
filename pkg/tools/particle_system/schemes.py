"""Time-stepping engines acting on whole particle ensembles.

The drift-randomised Milstein scheme advances every particle in two stages:

    predictor:  X_{j,eta} = X_{j-1} + eta_j h_j b(t_{j-1}, X_{j-1}, mu_{j-1})
                            + sigma1 dW^i_partial + sigma0 dW^0_partial
    corrector:  X_j = X_{j-1} + Gamma_j

where the partial increments run up to the randomised point t_{j-1} + eta_j h_j
and Gamma_j = h_j b(t_{j-1} + eta_j h_j, X_{j,eta}, mu_{j,eta}) plus the Milstein
stochastic terms, whose coefficients are frozen at (t_{j-1}, mu_{j-1}). The drift
is never differentiated.

Array index letters used in the einsum expressions:
    i, k  particles          a, e  state components
    l     target noise comp  c     source noise comp
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from tools.particle_system import config
from tools.particle_system.grid_noise import NoiseBundle, TimeGrid, iterated_integrals
from tools.particle_system.model import ModelSpec

logger = logging.getLogger(__name__)

SCHEMES = ("euler", "milstein")
MODES = ("full", "drop_measure_terms", "commutative")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Particle states at every grid point.

    Attributes:
        grid: Time grid of the run.
        frames: Array [n_steps + 1, N, d]; frames[0] is the initial ensemble.
        scheme: "euler" or "milstein".
        mode: Milstein mode, None for Euler.
        predictors: Optional array [n_steps, N, d] of predictor ensembles.
        diverged_at: First step producing non-finite states; later frames are NaN.
    """

    grid: TimeGrid
    frames: np.ndarray
    scheme: str
    mode: Optional[str] = None
    predictors: Optional[np.ndarray] = None
    diverged_at: Optional[int] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def terminal(self) -> np.ndarray:
        return self.frames[-1]


def resolve_mode(model: ModelSpec, n_particles: int, mode: Optional[str] = None) -> str:
    """Pick the Milstein mode, defaulting to the large-N mode above 64 particles.

    Raises:
        ValueError: If the mode is unknown, or commutative mode meets common noise or
            a model without the commutation condition.
    """
    if mode is None:
        if model.drop_measure_terms or n_particles > config.DROP_MEASURE_TERMS_ABOVE:
            return "drop_measure_terms"
        return "full"
    if mode not in MODES:
        raise ValueError(f"Unknown Milstein mode '{mode}'. Expected one of {MODES}")
    if mode == "commutative" and model.m0 > 0:
        raise ValueError(
            "Commutative mode requires m0 = 0; the reduced update has no common-noise terms"
        )
    if mode == "commutative" and not model.commutative:
        raise ValueError(
            f"Commutative mode requested for model '{model.name}', which does not "
            "satisfy the commutation condition"
        )
    return mode


def check_compatible(model: ModelSpec, bundle: NoiseBundle, ensemble: np.ndarray) -> None:
    """Raise ValueError unless model, bundle and ensemble dimensions agree."""
    if model.m1 != bundle.m1 or model.m0 != bundle.m0:
        raise ValueError(
            f"Model noise dimensions (m1={model.m1}, m0={model.m0}) do not match "
            f"bundle (m1={bundle.m1}, m0={bundle.m0})"
        )
    expected = (bundle.n_particles, model.d)
    if ensemble.shape != expected:
        raise ValueError(f"Ensemble has shape {ensemble.shape}, expected {expected}")


def _noise_term(
    s1: np.ndarray, s0: np.ndarray, dw: np.ndarray, dw0: np.ndarray
) -> np.ndarray:
    return np.einsum("iac,ic->ia", s1, dw) + np.einsum("iac,c->ia", s0, dw0)


def _predict(model: ModelSpec, bundle: NoiseBundle, row: int, x: np.ndarray) -> np.ndarray:
    t = bundle.grid.times[row]
    partial_step = bundle.etas[row] * bundle.grid.steps[row]
    s1 = model.diffusion_at(1, t, x, x)
    s0 = model.diffusion_at(0, t, x, x)
    noise = _noise_term(s1, s0, bundle.particle_partial[row], bundle.common_partial[row])
    return x + (partial_step * model.drift_at(t, x, x) + noise)


def predictor_step(
    model: ModelSpec, bundle: NoiseBundle, j: int, ensemble: np.ndarray
) -> np.ndarray:
    """Euler step from X_{j-1} to the randomised point t_{j-1} + eta_j h_j.

    Args:
        model: Model coefficients.
        bundle: Noise covering step j.
        j: 1-based step index.
        ensemble: States X_{j-1}, [N, d].

    Returns:
        np.ndarray: Predictor ensemble X_{j,eta}, [N, d]; may be non-finite.
    """
    row = bundle.check_step(j)
    ensemble = np.asarray(ensemble, dtype=float)
    check_compatible(model, bundle, ensemble)
    return _predict(model, bundle, row, ensemble)


def _correction_terms(
    model: ModelSpec,
    bundle: NoiseBundle,
    j: int,
    t: float,
    x: np.ndarray,
    s1: np.ndarray,
    s0: np.ndarray,
    with_measure_terms: bool,
) -> Optional[np.ndarray]:
    jacobian = {u: model.has_space_jacobian(u) for u in (0, 1)}
    measure = {u: with_measure_terms and model.has_measure_derivative(u) for u in (0, 1)}
    if not any(jacobian.values()) and not any(measure.values()):
        return None

    integrals = iterated_integrals(bundle, j, cross_particle=measure[1])
    N = x.shape[0]
    total = np.zeros_like(x)

    if jacobian[1]:
        J = model.space_jacobian_at(1, t, x, x)
        total += np.einsum("ilae,iec,icl->ia", J, s1, integrals.particle_self)
        total += np.einsum("ilae,iec,cil->ia", J, s0, integrals.common_to_particle)
    if jacobian[0]:
        J = model.space_jacobian_at(0, t, x, x)
        total += np.einsum("ilae,iec,icl->ia", J, s1, integrals.particle_to_common)
        total += np.einsum("ilae,iec,cl->ia", J, s0, integrals.common_common)
    if measure[1]:
        D = model.measure_derivative_at(1, t, x, x, x)
        total += np.einsum("iklae,kec,kcil->ia", D, s1, integrals.particle_cross) / N
        total += np.einsum("iklae,kec,cil->ia", D, s0, integrals.common_to_particle) / N
    if measure[0]:
        D = model.measure_derivative_at(0, t, x, x, x)
        total += np.einsum("iklae,kec,kcl->ia", D, s1, integrals.particle_to_common) / N
        total += np.einsum("iklae,kec,cl->ia", D, s0, integrals.common_common) / N
    return total


def milstein_increment(
    model: ModelSpec,
    bundle: NoiseBundle,
    j: int,
    ensemble: np.ndarray,
    mode: Optional[str] = None,
    predictor: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Compute the increment Gamma_j of the randomised Milstein scheme.

    Args:
        model: Model coefficients.
        bundle: Noise covering step j; its eta_j and increments are reused.
        j: 1-based step index.
        ensemble: States at t_{j-1}, [N, d].
        mode: "full", "drop_measure_terms" or "commutative"; None picks the default.
        predictor: Precomputed X_{j,eta}; recomputed from ``ensemble`` when None.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (Gamma_j, predictor), both [N, d].

    Raises:
        ValueError: On incompatible inputs or a commutative mode the model does not allow.
    """
    row = bundle.check_step(j)
    x = np.asarray(ensemble, dtype=float)
    check_compatible(model, bundle, x)
    mode = resolve_mode(model, bundle.n_particles, mode)

    t = bundle.grid.times[row]
    h = bundle.grid.steps[row]
    if predictor is None:
        predictor = _predict(model, bundle, row, x)

    s1 = model.diffusion_at(1, t, x, x)
    s0 = model.diffusion_at(0, t, x, x)
    dw = bundle.particle_coarse[row]
    increment = h * model.drift_at(t + bundle.etas[row] * h, predictor, predictor)
    increment = increment + _noise_term(s1, s0, dw, bundle.common_coarse[row])

    if mode == "commutative":
        if model.has_space_jacobian(1):
            J = model.space_jacobian_at(1, t, x, x)
            products = dw[:, :, None] * dw[:, None, :] - h * np.eye(model.m1)
            increment = increment + 0.5 * np.einsum("ilae,iec,ilc->ia", J, s1, products)
        return increment, predictor

    correction = _correction_terms(
        model, bundle, j, t, x, s1, s0, with_measure_terms=mode == "full"
    )
    if correction is not None:
        increment = increment + correction
    return increment, predictor


def euler_increment(
    model: ModelSpec, bundle: NoiseBundle, j: int, ensemble: np.ndarray
) -> np.ndarray:
    """Euler-Maruyama increment h b + sigma1 dW + sigma0 dW0 at the left endpoint."""
    row = bundle.check_step(j)
    x = np.asarray(ensemble, dtype=float)
    check_compatible(model, bundle, x)
    t = bundle.grid.times[row]
    s1 = model.diffusion_at(1, t, x, x)
    s0 = model.diffusion_at(0, t, x, x)
    noise = _noise_term(s1, s0, bundle.particle_coarse[row], bundle.common_coarse[row])
    return bundle.grid.steps[row] * model.drift_at(t, x, x) + noise


def milstein_step(
    model: ModelSpec,
    bundle: NoiseBundle,
    j: int,
    ensemble: np.ndarray,
    mode: Optional[str] = None,
) -> np.ndarray:
    """Advance the ensemble over step j with the randomised Milstein scheme."""
    increment, _ = milstein_increment(model, bundle, j, ensemble, mode)
    return np.asarray(ensemble, dtype=float) + increment


def euler_step(
    model: ModelSpec, bundle: NoiseBundle, j: int, ensemble: np.ndarray
) -> np.ndarray:
    """Advance the ensemble over step j with the Euler-Maruyama scheme."""
    return np.asarray(ensemble, dtype=float) + euler_increment(model, bundle, j, ensemble)


def simulate(
    model: ModelSpec,
    grid: TimeGrid,
    bundle: NoiseBundle,
    initial: np.ndarray,
    scheme: str = "milstein",
    mode: Optional[str] = None,
    keep_predictors: bool = False,
) -> Trajectory:
    """Run a scheme over all steps of the grid.

    All particles complete step j before any particle starts step j + 1. A run
    whose states become non-finite stops at that step; the trajectory records the
    step in ``diverged_at`` and fills the remaining frames with NaN.

    Args:
        model: Model coefficients.
        grid: Time grid; must equal the bundle's grid.
        bundle: Noise for the whole run.
        initial: Finite initial ensemble [N, d].
        scheme: "milstein" or "euler".
        mode: Milstein mode, see ``resolve_mode``.
        keep_predictors: Retain the predictor ensembles (Milstein only).

    Returns:
        Trajectory: The simulated frames.

    Raises:
        ValueError: If the inputs do not match or the scheme is unknown.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"Unknown scheme '{scheme}'. Expected one of {SCHEMES}")
    if not grid.same_as(bundle.grid):
        raise ValueError("Noise bundle was sampled on a different grid")
    initial = np.array(initial, dtype=float)
    check_compatible(model, bundle, initial)
    if not np.all(np.isfinite(initial)):
        raise ValueError("Initial ensemble must be finite")

    resolved = resolve_mode(model, bundle.n_particles, mode) if scheme == "milstein" else None
    n = grid.n_steps
    frames = np.full((n + 1,) + initial.shape, np.nan)
    frames[0] = initial
    predictors = np.full((n,) + initial.shape, np.nan) if keep_predictors and resolved else None
    diverged_at = None

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for j in range(1, n + 1):
            current = frames[j - 1]
            if resolved is None:
                frames[j] = current + euler_increment(model, bundle, j, current)
            else:
                increment, predictor = milstein_increment(model, bundle, j, current, resolved)
                frames[j] = current + increment
                if predictors is not None:
                    predictors[j - 1] = predictor
            if not np.all(np.isfinite(frames[j])):
                diverged_at = j
                frames[j:] = np.nan
                logger.debug(f"{scheme} run diverged at step {j} of {n}")
                break

    return Trajectory(
        grid=grid,
        frames=frames,
        scheme=scheme,
        mode=resolved,
        predictors=predictors,
        diverged_at=diverged_at,
    )
