"""Run configuration: one JSON document per run.

Every key is checked, unknown keys are rejected, and errors carry a dotted
path into the document (``measure.level: ...``).  Only ``experiment`` and
``seed`` are required; documented defaults fill the rest (``grid.dt = 0.05``,
``replicas = 1000``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from typing import Annotated, List, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticError

from ..envelope import EnvelopeFn, dvoretzky_erdos_test, envelope_from_spec
from ..errors import ConfigError, GmcLabError

__all__ = ["EXPERIMENTS", "RunConfig", "validate_config", "config_hash", "OUT_ENV"]

EXPERIMENTS = (
    "covariance-validation",
    "brownian-closed-forms",
    "martingale-identities",
    "convergence",
    "mollified-convergence",
    "degeneracy",
    "capacity",
    "envelope-tests",
)

# the only environment override: where outputs go
OUT_ENV = "GMC_LAB_OUT"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, validate_default=True)


def _envelope(spec) -> dict:
    try:
        env = envelope_from_spec(spec)
    except (GmcLabError, TypeError) as exc:
        raise ValueError(str(exc)) from None
    return env.to_dict() if hasattr(env, "to_dict") else dict(spec)


class KernelSpec(_Strict):
    eta1: float = Field(0.5, ge=0.0, le=1.0)
    eta2: float = Field(1.0, gt=0.0)
    d: Literal[1, 2] = 1
    kappa: Literal["selfconv-bump"] = "selfconv-bump"
    k0: Literal["zero"] = "zero"


class MollifierSpec(_Strict):
    profile: Literal["bump", "flat"] = "bump"
    contrast_profile: Literal["bump", "flat"] = "flat"

    @model_validator(mode="after")
    def _distinct(self):
        if self.profile == self.contrast_profile:
            raise ValueError("profile and contrast_profile must differ")
        return self


class LebesgueSpec(_Strict):
    scheme: Literal["lebesgue"]
    box: List[List[float]] = [[0.0, 1.0]]
    h: float = Field(1.0 / 64, gt=0.0)


class CantorMeasureSpec(_Strict):
    scheme: Literal["cantor"]
    schedule: dict = {"kind": "power", "gamma": 0.5, "scale": 0.5}
    level: int = Field(10, ge=1, le=14)

    _check = field_validator("schedule")(lambda cls, v: _envelope(v))


class OccupationSpec(_Strict):
    scheme: Literal["occupation"]
    T: float = Field(1.0, gt=0.0)
    dt: float = Field(1e-3, gt=0.0)
    seed: int = 0
    d: Literal[1, 2] = 2


MeasureSpec = Annotated[Union[LebesgueSpec, CantorMeasureSpec, OccupationSpec], Field(discriminator="scheme")]


class TruncationSpec(_Strict):
    q: float = Field(3.0, gt=0.0)
    r: float = Field(3.0, ge=0.0)


class GridSpec(_Strict):
    checkpoints: List[float] = [1.0, 2.0, 4.0, 8.0]
    dt: float = Field(0.05, gt=0.0)

    @field_validator("checkpoints")
    @classmethod
    def _positive_sorted(cls, v):
        if not v or any(t <= 0 for t in v) or sorted(set(v)) != list(v):
            raise ValueError("checkpoints must be positive, distinct and increasing")
        return v


class RunConfig(_Strict):
    experiment: Literal[EXPERIMENTS]
    seed: int = Field(ge=0)
    kernel: KernelSpec = KernelSpec()
    mollifier: MollifierSpec = MollifierSpec()
    envelope: dict = {"kind": "power", "gamma": 0.3}
    measure: MeasureSpec = LebesgueSpec(scheme="lebesgue")
    contrast_measure: MeasureSpec = LebesgueSpec(scheme="lebesgue", h=1.0 / 1024)
    truncation: TruncationSpec = TruncationSpec()
    grid: GridSpec = GridSpec()
    eps: List[float] = [math.exp(-4.0), math.exp(-6.0)]
    alpha: float = Field(1.5, ge=0.0)
    replicas: int = Field(1000, ge=1)
    output_dir: str = "gmc-lab-out"

    _check_env = field_validator("envelope")(lambda cls, v: _envelope(v))

    @field_validator("eps")
    @classmethod
    def _eps_range(cls, v):
        if not v or any(not (0.0 < e < 1.0) for e in v):
            raise ValueError("every eps must lie in (0, 1)")
        return v

    @property
    def rho(self) -> EnvelopeFn:
        return envelope_from_spec(self.envelope)

    @model_validator(mode="after")
    def _cross_checks(self):
        if measure_dim(self.measure) != self.kernel.d:
            raise ValueError("kernel.d: differs from the measure dimension")
        if self.experiment == "convergence" and not dvoretzky_erdos_test(self.rho).converges:
            raise ValueError("envelope: the convergence experiment needs a convergent envelope (Dvoretzky-Erdos)")
        if self.experiment == "degeneracy":
            if self.measure.scheme != "cantor":
                raise ValueError("measure: the degeneracy experiment needs a Cantor measure")
            sched = envelope_from_spec(self.measure.schedule)
            if not hasattr(sched, "scale"):
                raise ValueError("measure.schedule: needs a power or sqrtlog schedule")
            half = dataclasses.replace(sched, scale=0.5 * sched.scale)
            if dvoretzky_erdos_test(half).converges:
                raise ValueError(
                    "measure.schedule: the induced envelope theta/2 is convergent, so no degeneracy is expected"
                )
            if not dvoretzky_erdos_test(self.rho).converges:
                raise ValueError("envelope: the contrast envelope must be convergent")
        if self.experiment == "capacity" and self.measure.scheme != "cantor":
            raise ValueError("measure: the capacity experiment needs a Cantor measure")
        if self.experiment == "mollified-convergence" and self.kernel.d != 1:
            raise ValueError("kernel.d: mollified experiments are available for d = 1")
        return self


def measure_dim(spec) -> int:
    if spec.scheme == "lebesgue":
        return len(spec.box)
    if spec.scheme == "cantor":
        return 1
    return spec.d


def _problems(exc: PydanticError) -> list:
    out = []
    for err in exc.errors():
        # drop the union tag pydantic inserts after a discriminated field
        path = ".".join(str(p) for p in err["loc"] if p not in ("lebesgue", "cantor", "occupation"))
        msg = err["msg"].removeprefix("Value error, ")
        if err["type"] == "missing":
            msg = "required key missing"
        elif err["type"] == "extra_forbidden":
            msg = "unknown key"
        elif err["type"] == "literal_error" and path == "experiment":
            msg = "unknown experiment; valid names: " + ", ".join(EXPERIMENTS)
        elif err["type"] == "value_error" and ": " in msg and not path:
            path, msg = msg.split(": ", 1)
        out.append((path, msg))
    return out


def validate_config(text, overrides=None) -> RunConfig:
    """Parse and validate a JSON config (text or mapping) into a ``RunConfig``.

    ``overrides`` (e.g. from the command line) replace top-level keys before
    validation.  Raises ``ConfigError`` listing every violation by path.
    """
    if isinstance(text, (str, bytes)):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([("", f"not valid JSON ({exc})")]) from None
    else:
        raw = dict(text)
    if not isinstance(raw, dict):
        raise ConfigError([("", "config must be a JSON object")])
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(raw)
    except PydanticError as exc:
        raise ConfigError(_problems(exc)) from None


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the normalized config, output directory excluded."""
    doc = cfg.model_dump(mode="json", exclude={"output_dir"})
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
