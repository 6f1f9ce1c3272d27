"""Run configuration for the CLI: validation, text format and manifests.

The text format is one ``key=value`` pair per line, parsed with python-dotenv.
Lines starting with ``#`` are comments, lists are comma separated and model
parameters are written as ``param.<name>=<value>``. Example::

    schema_version=1
    model=gbm
    param.a=0.5
    T=1.0
    h_levels=0.125,0.0625,0.03125
    M=200
    seed=7

Unknown keys are errors. All violations of a text are reported together.
"""

import io
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from tools.particle_system import config
from tools.particle_system.model import BUILTIN_MODELS, ModelSpec, builtin_model

LIST_FIELDS = ("h_levels", "N_levels", "slope_window")
SUBCOMMANDS = ("simulate", "convergence", "quadrature", "consistency", "poc", "moments")

_DIVISIBILITY_TOLERANCE = 1e-9


class ConfigError(ValueError):
    """Invalid run configuration.

    Attributes:
        violations: One message per violated constraint, prefixed by the field path.
    """

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("Invalid configuration:\n" + "\n".join(f"  - {v}" for v in violations))


def _divides(small: float, large: float) -> bool:
    ratio = large / small
    return round(ratio) >= 1 and abs(ratio - round(ratio)) <= _DIVISIBILITY_TOLERANCE * ratio


class RunConfig(BaseModel):
    """Validated configuration of one CLI run.

    Attributes:
        schema_version: Version of the text format.
        model: Built-in model name.
        params: Model parameters; missing ones take the model defaults.
        scheme: "milstein" or "euler".
        mode: Milstein mode; None picks the default for the particle count.
        integrand: Integrand of the quadrature study.
        reference: Reference of the consistency study, "fine" or "self".
        T: Time horizon.
        n: Number of steps for simulate and poc.
        h_levels: Step sizes of the studies.
        h_ref: Reference step size.
        K: Fine sub-increments per step; None picks ceil(1/h).
        N: Number of particles.
        N_levels: Particle counts of the poc study.
        N_ref: Size of the poc reference system.
        M: Replicates.
        q: Exponent of the error norms.
        p: Exponent of the moment check.
        x0: Initial state.
        x0_spread: Standard deviation of the initial ensemble.
        seed: Master seed.
        workers: Worker threads.
        out: Output directory.
        slope_window: Pass window (low, high) of the fitted slope for --check.
        bootstrap: Bootstrap resamples for the error bars.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)

    schema_version: int = Field(config.SCHEMA_VERSION, ge=1, le=config.SCHEMA_VERSION)
    model: Optional[str] = None
    params: Dict[str, float] = Field(default_factory=dict)
    scheme: Literal["milstein", "euler"] = "milstein"
    mode: Optional[Literal["full", "drop_measure_terms", "commutative"]] = None
    integrand: Literal["constant", "linear", "sine", "brownian"] = "brownian"
    reference: Literal["fine", "self"] = "fine"
    T: float = Field(1.0, gt=0)
    n: Optional[int] = Field(None, ge=1)
    h_levels: List[float] = Field(default_factory=list)
    h_ref: Optional[float] = Field(None, gt=0)
    K: Optional[int] = Field(None, ge=1)
    N: int = Field(1, ge=1)
    N_levels: List[int] = Field(default_factory=list)
    N_ref: Optional[int] = Field(None, ge=1)
    M: int = Field(10, ge=1)
    q: float = Field(config.DEFAULT_NORM_EXPONENT, ge=2)
    p: float = Field(2.0, ge=2)
    x0: float = 1.0
    x0_spread: float = Field(0.0, ge=0)
    seed: int = Field(0, ge=0)
    workers: int = Field(1, ge=1)
    out: str = "results"
    slope_window: Optional[Tuple[float, float]] = None
    bootstrap: int = Field(config.DEFAULT_BOOTSTRAP_RESAMPLES, ge=2)

    @model_validator(mode="after")
    def check_cross_fields(self) -> "RunConfig":
        violations = self.cross_field_violations()
        if violations:
            raise ConfigError(violations)
        return self

    def cross_field_violations(self) -> List[str]:
        """Constraints spanning several fields, one message per violation."""
        violations = []
        if any(h <= 0 for h in self.h_levels):
            violations.append(f"h_levels: step sizes must be positive, got {self.h_levels}")
        else:
            for h in self.h_levels:
                if h > min(1.0, self.T):
                    violations.append(f"h_levels: step {h} exceeds min(1, T) = {min(1.0, self.T)}")
                elif not _divides(h, self.T):
                    violations.append(f"h_levels: step {h} does not divide T = {self.T}")
                if self.h_ref is not None and not _divides(self.h_ref, h):
                    violations.append(
                        f"h_ref: {self.h_ref} does not divide h_levels entry {h}"
                    )
            if len(set(self.h_levels)) != len(self.h_levels):
                violations.append(f"h_levels: step sizes must be distinct, got {self.h_levels}")
            elif self.h_ref is None and self.h_levels:
                # without h_ref the finest level is the base grid of the studies
                finest = min(self.h_levels)
                for h in self.h_levels:
                    if not _divides(finest, h):
                        violations.append(
                            f"h_levels: step {h} is not a multiple of the finest level {finest}"
                        )
        if self.h_ref is not None and not _divides(self.h_ref, self.T):
            violations.append(f"h_ref: {self.h_ref} does not divide T = {self.T}")
        if self.n is not None and self.T / self.n > min(1.0, self.T):
            violations.append(f"n: step T / n = {self.T / self.n} exceeds min(1, T)")
        if any(count < 1 for count in self.N_levels):
            violations.append(f"N_levels: particle counts must be positive, got {self.N_levels}")
        elif self.N_ref is not None:
            for count in self.N_levels:
                if count > self.N_ref:
                    violations.append(f"N_ref: {self.N_ref} is smaller than N_levels entry {count}")
                elif self.N_ref % count:
                    violations.append(f"N_ref: {self.N_ref} is not a multiple of N_levels entry {count}")
        if self.slope_window is not None and self.slope_window[0] > self.slope_window[1]:
            violations.append(f"slope_window: lower bound exceeds upper bound {self.slope_window}")

        if self.model is None:
            if self.params:
                violations.append("params: model parameters given without a model")
            return violations
        if self.model not in BUILTIN_MODELS:
            violations.append(
                f"model: unknown model '{self.model}', expected one of {sorted(BUILTIN_MODELS)}"
            )
            return violations
        try:
            spec = builtin_model(self.model, self.params)
        except ValidationError as error:
            violations.extend(_violations(error, prefix="params"))
            return violations
        if self.mode == "commutative" and spec.m0 > 0:
            violations.append(
                f"mode: the reduced commutative update requires m0 = 0, but model "
                f"{self.model} has common noise of dimension {spec.m0}"
            )
        elif self.mode == "commutative" and not spec.commutative:
            violations.append(
                f"mode: model {self.model} does not satisfy the commutation condition"
            )
        return violations

    def build_model(self) -> ModelSpec:
        """Build the configured model."""
        if self.model is None:
            raise ConfigError(["model: no model configured"])
        return builtin_model(self.model, self.params)

    def violations_for(self, subcommand: str) -> List[str]:
        """Fields a subcommand needs that this config does not provide."""
        if subcommand not in SUBCOMMANDS:
            return [f"subcommand: unknown subcommand '{subcommand}'"]
        violations = []
        needs_model = subcommand != "quadrature"
        if needs_model and self.model is None:
            violations.append(f"model: required by {subcommand}")
        if subcommand in ("simulate", "poc") and self.n is None:
            violations.append(f"n: required by {subcommand}")
        if subcommand in ("convergence", "quadrature", "consistency", "moments") and not self.h_levels:
            violations.append(f"h_levels: required by {subcommand}")
        if subcommand != "simulate" and self.M < 2:
            violations.append(f"M: {subcommand} needs at least 2 replicates, got {self.M}")
        if subcommand == "consistency" and self.h_ref is None:
            violations.append("h_ref: required by consistency")
        if subcommand == "convergence" and self.h_ref is None and self.model in BUILTIN_MODELS:
            if self.build_model().closed_form is None:
                violations.append(
                    f"h_ref: required by convergence for model {self.model} without a closed form"
                )
        if subcommand == "poc":
            if not self.N_levels:
                violations.append("N_levels: required by poc")
            if self.N_ref is None:
                violations.append("N_ref: required by poc")
        return violations


def _violations(error: ValidationError, prefix: str = "") -> List[str]:
    violations = []
    for item in error.errors():
        cause = item.get("ctx", {}).get("error")
        if isinstance(cause, ConfigError):
            violations.extend(cause.violations)
            continue
        path = ".".join(str(part) for part in (prefix, *item["loc"]) if part != "")
        violations.append(f"{path or 'config'}: {item['msg']}")
    return violations


def parse_config(text: str) -> RunConfig:
    """Parse and validate the key-value text of a run configuration.

    Args:
        text: Configuration text.

    Returns:
        RunConfig: The validated configuration with defaults filled in.

    Raises:
        ConfigError: Listing every violation, with field paths.
    """
    raw = dotenv_values(stream=io.StringIO(text), interpolate=False)
    violations = []
    data: Dict[str, Any] = {}
    params: Dict[str, str] = {}
    for key, value in raw.items():
        if value is None:
            violations.append(f"{key}: missing value")
        elif key.startswith(config.PARAM_PREFIX):
            params[key[len(config.PARAM_PREFIX):]] = value
        elif key in LIST_FIELDS:
            data[key] = [v.strip() for v in value.split(config.LIST_SEPARATOR) if v.strip()]
        else:
            data[key] = value
    if params:
        data["params"] = params
    try:
        result = validate_config(data)
    except ConfigError as error:
        raise ConfigError(violations + error.violations)
    if violations:
        raise ConfigError(violations)
    return result


def validate_config(data: Dict[str, Any]) -> RunConfig:
    """Validate structured configuration data, reporting every violation.

    Raises:
        ConfigError: Listing every violation, with field paths.
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as error:
        raise ConfigError(_violations(error))


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return config.LIST_SEPARATOR.join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(run_config: RunConfig) -> str:
    """Render the canonical text of a configuration.

    Fields left at None or empty are omitted, so parsing the text back yields
    an equal configuration.
    """
    lines = []
    for name, value in run_config.model_dump().items():
        if name == "params":
            lines.extend(
                f"{config.PARAM_PREFIX}{key}={_format_value(float(v))}"
                for key, v in sorted(value.items())
            )
        elif value is None or (isinstance(value, (list, tuple)) and not value):
            continue
        else:
            lines.append(f"{name}={_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_from_manifest(manifest: Dict[str, Any]) -> RunConfig:
    """Re-parse the canonical configuration text stored in a run manifest."""
    if "config_text" not in manifest:
        raise ConfigError(["config_text: missing from manifest"])
    return parse_config(manifest["config_text"])
