"""Coefficient specifications for McKean-Vlasov models and a built-in model library.

Measure arguments are always finite ensembles: the schemes only evaluate
coefficients at empirical measures (1/N) sum_k delta_{x^k}, so every callback
receives the whole ensemble as an [N, d] array.

Callbacks are batched over the particles being evaluated:

    drift(t, x[n, d], ensemble[N, d])                   -> [n, d]
    diffusion1(t, x, ensemble)                          -> [n, d, m1]
    diffusion0(t, x, ensemble)                          -> [n, d, m0]
    space_jacobian_u(t, x, ensemble)                    -> [n, m_u, d, d]
    measure_derivative_u(t, x, ensemble, y[k, d])       -> [n, k, m_u, d, d]

space_jacobian_u[i, l] is the Jacobian of the column sigma_u^l in x, and
measure_derivative_u[i, k, l] the finite-N Lions derivative of sigma_u^l at
(x^i, mu) in direction y^k. A derivative callback left as None is identically
zero and the corresponding correction terms are skipped.

Callbacks must be pure functions of their arguments. The global Lipschitz and
linear growth assumptions of the convergence theory are obligations of the
model author; ``probe_lipschitz`` spot-checks them on random samples.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, Mapping, Optional, Tuple, Type

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

Coefficient = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
MeasureDerivative = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
ClosedForm = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ParticleEnsemble:
    """Particle positions representing the empirical measure (1/N) sum_i delta_{x_i}.

    Attributes:
        states: Array [N, d] of finite particle positions.
    """

    states: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValueError(f"Ensemble must be a non-empty [N, d] array, got {states.shape}")
        if not np.all(np.isfinite(states)):
            raise ValueError("Ensemble states must be finite")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]


def ensemble_mean(ensemble) -> np.ndarray:
    """Arithmetic mean of the particle positions.

    Args:
        ensemble: ParticleEnsemble or [N, d] array.

    Returns:
        np.ndarray: d-vector, summed in particle index order.
    """
    states = ensemble.states if isinstance(ensemble, ParticleEnsemble) else np.asarray(ensemble, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    return np.add.reduce(states, axis=0) / states.shape[0]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Coefficients of an interacting particle system with optional common noise.

    Attributes:
        d: State dimension.
        m1: Dimension of each idiosyncratic noise.
        m0: Dimension of the common noise, 0 when sigma0 is identically zero.
        drift: b(t, x, ensemble).
        diffusion1: sigma1(t, x, ensemble).
        diffusion0: sigma0(t, x, ensemble); required when m0 > 0.
        space_jacobian1: d_x sigma1, or None for zero.
        space_jacobian0: d_x sigma0, or None for zero.
        measure_derivative1: d_mu sigma1, or None for zero.
        measure_derivative0: d_mu sigma0, or None for zero.
        commutative: The diffusion satisfies the commutation condition, so the
            reduced Milstein update may be used.
        drop_measure_terms: Prefer the large-N mode without measure terms.
        closed_form: Optional exact solution (t, x0[N, d], W_t[N, m1], W0_t[m0])
            -> [N, d] driven by the same Brownian paths.
        name: Model identifier.
        params: Parameter values the model was built from.
    """

    d: int
    m1: int
    m0: int
    drift: Coefficient
    diffusion1: Coefficient
    diffusion0: Optional[Coefficient] = None
    space_jacobian1: Optional[Coefficient] = None
    space_jacobian0: Optional[Coefficient] = None
    measure_derivative1: Optional[MeasureDerivative] = None
    measure_derivative0: Optional[MeasureDerivative] = None
    commutative: bool = False
    drop_measure_terms: bool = False
    closed_form: Optional[ClosedForm] = None
    name: str = "custom"
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 1 or self.m1 < 1 or self.m0 < 0:
            raise ValueError(
                f"Invalid dimensions d={self.d}, m1={self.m1}, m0={self.m0}"
            )
        if self.m0 > 0 and self.diffusion0 is None:
            raise ValueError(f"Model declares m0={self.m0} but no common diffusion")

    def noise_dimension(self, u: int) -> int:
        return self.m1 if u == 1 else self.m0

    def drift_at(self, t: float, x: np.ndarray, ensemble: np.ndarray) -> np.ndarray:
        return _checked("drift", self.drift(t, x, ensemble), (x.shape[0], self.d))

    def diffusion_at(
        self, u: int, t: float, x: np.ndarray, ensemble: np.ndarray
    ) -> np.ndarray:
        """Evaluate sigma_u as an [n, d, m_u] array; zeros without common noise."""
        m = self.noise_dimension(u)
        if u == 0 and m == 0:
            return np.zeros((x.shape[0], self.d, 0))
        callback = self.diffusion1 if u == 1 else self.diffusion0
        return _checked(f"diffusion{u}", callback(t, x, ensemble), (x.shape[0], self.d, m))

    def has_space_jacobian(self, u: int) -> bool:
        callback = self.space_jacobian1 if u == 1 else self.space_jacobian0
        return callback is not None and self.noise_dimension(u) > 0

    def has_measure_derivative(self, u: int) -> bool:
        callback = self.measure_derivative1 if u == 1 else self.measure_derivative0
        return callback is not None and self.noise_dimension(u) > 0

    def space_jacobian_at(
        self, u: int, t: float, x: np.ndarray, ensemble: np.ndarray
    ) -> np.ndarray:
        callback = self.space_jacobian1 if u == 1 else self.space_jacobian0
        shape = (x.shape[0], self.noise_dimension(u), self.d, self.d)
        return _checked(f"space_jacobian{u}", callback(t, x, ensemble), shape)

    def measure_derivative_at(
        self, u: int, t: float, x: np.ndarray, ensemble: np.ndarray, y: np.ndarray
    ) -> np.ndarray:
        callback = self.measure_derivative1 if u == 1 else self.measure_derivative0
        shape = (x.shape[0], y.shape[0], self.noise_dimension(u), self.d, self.d)
        return _checked(f"measure_derivative{u}", callback(t, x, ensemble, y), shape)


def _checked(name: str, value, shape: Tuple[int, ...]) -> np.ndarray:
    array = np.asarray(value, dtype=float)
    if array.shape != shape:
        try:
            array = np.broadcast_to(array, shape)
        except ValueError:
            raise ValueError(f"{name} returned shape {array.shape}, expected {shape}")
    return array


def _constant(value: float, trailing: Tuple[int, ...]) -> Coefficient:
    def coefficient(t, x, ensemble):
        return np.full((x.shape[0],) + trailing, value)

    return coefficient


def _constant_derivative(value: float, trailing: Tuple[int, ...]) -> MeasureDerivative:
    def derivative(t, x, ensemble, y):
        return np.full((x.shape[0], y.shape[0]) + trailing, value)

    return derivative


class _Params(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)


class GbmParams(_Params):
    """Geometric Brownian motion dX = a X dt + nu X dW."""

    a: float = Field(0.5, description="Drift rate")
    nu: float = Field(0.3, description="Volatility")


class MvouParams(_Params):
    """Mean-reverting Ornstein-Uhlenbeck attraction to the ensemble mean."""

    kappa: float = Field(1.0, description="Rate of attraction to the ensemble mean")
    sigma: float = Field(0.5, description="Idiosyncratic volatility")
    sigma0: float = Field(0.0, description="Common-noise volatility, 0 disables W0")


class NonsmoothConvParams(_Params):
    """Drift -alpha|x| - beta (1/N) sum_k |x - y_k| with multiplicative noise."""

    alpha: float = Field(1.0, description="Weight of the confinement -|x|")
    beta: float = Field(0.5, description="Weight of the convolution with -|.|")
    nu: float = Field(0.3, description="Multiplicative volatility")


class KuramotoCommonParams(_Params):
    """Kuramoto-type phase interaction on the line with common noise."""

    beta: float = Field(1.0, description="Coupling strength")
    sigma: float = Field(0.5, description="Idiosyncratic volatility")
    sigma0: float = Field(0.3, description="Common-noise volatility, 0 disables W0")


class MeanVolatilityParams(_Params):
    """Mean-field volatility with a state-dependent common noise.

    b = kappa (mean - x) - alpha |x|, sigma1 = sigma + nu mean, sigma0 = sigma0 x.
    """

    kappa: float = Field(1.0, description="Rate of attraction to the ensemble mean")
    alpha: float = Field(0.5, description="Weight of the confinement -|x|")
    sigma: float = Field(0.2, description="Base idiosyncratic volatility")
    nu: float = Field(0.1, description="Sensitivity of sigma1 to the ensemble mean")
    sigma0: float = Field(0.2, description="Multiplicative common-noise volatility")


def _gbm(params: GbmParams) -> ModelSpec:
    a, nu = params.a, params.nu

    def drift(t, x, ensemble):
        return a * x

    def diffusion1(t, x, ensemble):
        return nu * x[:, :, None]

    def closed_form(t, x0, w, w0):
        return x0 * np.exp((a - 0.5 * nu * nu) * t + nu * w)

    return ModelSpec(
        d=1,
        m1=1,
        m0=0,
        drift=drift,
        diffusion1=diffusion1,
        space_jacobian1=_constant(nu, (1, 1, 1)),
        commutative=True,
        closed_form=closed_form,
    )


def _mvou(params: MvouParams) -> ModelSpec:
    kappa = params.kappa
    m0 = 1 if params.sigma0 != 0 else 0

    def drift(t, x, ensemble):
        return kappa * (ensemble_mean(ensemble)[None, :] - x)

    return ModelSpec(
        d=1,
        m1=1,
        m0=m0,
        drift=drift,
        diffusion1=_constant(params.sigma, (1, 1)),
        diffusion0=_constant(params.sigma0, (1, 1)) if m0 else None,
        commutative=m0 == 0,
    )


def _nonsmooth_conv(params: NonsmoothConvParams) -> ModelSpec:
    alpha, beta, nu = params.alpha, params.beta, params.nu

    def drift(t, x, ensemble):
        distances = np.abs(x[:, None, :] - ensemble[None, :, :])
        return -alpha * np.abs(x) - beta * np.add.reduce(distances, axis=1) / ensemble.shape[0]

    def diffusion1(t, x, ensemble):
        return nu * x[:, :, None]

    return ModelSpec(
        d=1,
        m1=1,
        m0=0,
        drift=drift,
        diffusion1=diffusion1,
        space_jacobian1=_constant(nu, (1, 1, 1)),
        commutative=True,
    )


def _kuramoto_common(params: KuramotoCommonParams) -> ModelSpec:
    beta = params.beta
    m0 = 1 if params.sigma0 != 0 else 0

    def drift(t, x, ensemble):
        phases = np.sin(ensemble[None, :, :] - x[:, None, :])
        return beta * np.add.reduce(phases, axis=1) / ensemble.shape[0]

    return ModelSpec(
        d=1,
        m1=1,
        m0=m0,
        drift=drift,
        diffusion1=_constant(params.sigma, (1, 1)),
        diffusion0=_constant(params.sigma0, (1, 1)) if m0 else None,
        commutative=m0 == 0,
    )


def _mean_volatility(params: MeanVolatilityParams) -> ModelSpec:
    kappa, alpha = params.kappa, params.alpha
    sigma, nu, sigma0 = params.sigma, params.nu, params.sigma0
    m0 = 1 if sigma0 != 0 else 0

    def drift(t, x, ensemble):
        return kappa * (ensemble_mean(ensemble)[None, :] - x) - alpha * np.abs(x)

    def diffusion1(t, x, ensemble):
        level = sigma + nu * ensemble_mean(ensemble)[0]
        return np.full((x.shape[0], 1, 1), level)

    def diffusion0(t, x, ensemble):
        return sigma0 * x[:, :, None]

    return ModelSpec(
        d=1,
        m1=1,
        m0=m0,
        drift=drift,
        diffusion1=diffusion1,
        diffusion0=diffusion0 if m0 else None,
        space_jacobian0=_constant(sigma0, (1, 1, 1)) if m0 else None,
        measure_derivative1=_constant_derivative(nu, (1, 1, 1)) if nu != 0 else None,
        commutative=m0 == 0,
    )


BUILTIN_MODELS: Dict[str, Tuple[Type[_Params], Callable[[Any], ModelSpec]]] = {
    "gbm": (GbmParams, _gbm),
    "mvou": (MvouParams, _mvou),
    "nonsmooth_conv": (NonsmoothConvParams, _nonsmooth_conv),
    "kuramoto_common": (KuramotoCommonParams, _kuramoto_common),
    "mean_volatility": (MeanVolatilityParams, _mean_volatility),
}


def builtin_defaults(name: str) -> Dict[str, float]:
    """Return the documented default parameters of a built-in model."""
    if name not in BUILTIN_MODELS:
        raise ValueError(
            f"Unknown model '{name}'. Expected one of {sorted(BUILTIN_MODELS)}"
        )
    return BUILTIN_MODELS[name][0]().model_dump()


def builtin_model(name: str, params: Optional[Mapping[str, Any]] = None) -> ModelSpec:
    """Build one of the shipped models by name.

    Args:
        name: One of gbm, mvou, nonsmooth_conv, kuramoto_common, mean_volatility.
        params: Parameter overrides; parameters not given take their defaults.

    Returns:
        ModelSpec: The model with ``name`` and the full parameter set attached.

    Raises:
        ValueError: If the name is unknown or a parameter is unknown or invalid.
    """
    if name not in BUILTIN_MODELS:
        raise ValueError(
            f"Unknown model '{name}'. Expected one of {sorted(BUILTIN_MODELS)}"
        )
    params_class, factory = BUILTIN_MODELS[name]
    validated = params_class(**dict(params or {}))
    spec = factory(validated)
    values = validated.model_dump()
    logger.debug(f"Built model {name} with {values}")
    return replace(spec, name=name, params=values)


@dataclass(frozen=True)
class LipschitzReport:
    """Largest observed ratio |f(x, mu) - f(x', mu')| / (|x - x'| + W2(mu, mu')).

    Attributes:
        drift: Ratio for b.
        diffusion1: Ratio for sigma1.
        diffusion0: Ratio for sigma0, 0 without common noise.
        sample_count: Number of sampled pairs.
    """

    drift: float
    diffusion1: float
    diffusion0: float
    sample_count: int


def probe_lipschitz(
    model: ModelSpec,
    sample_count: int,
    radius: float,
    seed: int,
    ensemble_size: int = 4,
) -> LipschitzReport:
    """Estimate Lipschitz ratios of the coefficients on random samples.

    Even-numbered pairs share the ensemble and move only x, odd-numbered pairs
    move both. The result is advisory; infinite ratios are reported as such.

    Args:
        model: Model to probe.
        sample_count: Number of pairs, at least 2.
        radius: Half-width of the cube the points are drawn from.
        seed: Seed of the sampling generator.
        ensemble_size: Particles in each sampled ensemble.

    Returns:
        LipschitzReport: Maximum ratios per coefficient.
    """
    from tools.particle_system.metrics import w2

    if sample_count < 2:
        raise ValueError(f"sample_count must be at least 2, got {sample_count}")
    generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    d = model.d
    ratios = np.zeros((sample_count, 3))

    def sample(shape):
        return radius * generator.uniform(-1.0, 1.0, size=shape)

    with np.errstate(divide="ignore", invalid="ignore"):
        for s in range(sample_count):
            x, x_other = sample((1, d)), sample((1, d))
            ensemble = sample((ensemble_size, d))
            ensemble_other = ensemble if s % 2 == 0 else sample((ensemble_size, d))
            distance = np.linalg.norm(x - x_other) + w2(ensemble, ensemble_other)
            pairs = [
                (model.drift_at(0.0, x, ensemble), model.drift_at(0.0, x_other, ensemble_other)),
                (
                    model.diffusion_at(1, 0.0, x, ensemble),
                    model.diffusion_at(1, 0.0, x_other, ensemble_other),
                ),
                (
                    model.diffusion_at(0, 0.0, x, ensemble),
                    model.diffusion_at(0, 0.0, x_other, ensemble_other),
                ),
            ]
            for c, (value, value_other) in enumerate(pairs):
                gap = np.linalg.norm(value - value_other)
                ratios[s, c] = gap / distance if gap > 0 else 0.0

    worst = ratios.max(axis=0)
    return LipschitzReport(
        drift=float(worst[0]),
        diffusion1=float(worst[1]),
        diffusion0=float(worst[2]),
        sample_count=sample_count,
    )
