"""Run configuration: parsing, validation and schedule resolution."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dynamics import ThermostatParams
from .ensemble import SamplingParams, linear_schedule, log_schedule
from .problem import ProblemError, ProblemSpec

SPACINGS = ("log", "linear")
DEFAULT_SCHEDULE = {"t_hi": "auto", "t_lo_factor": 0.05, "count": 24, "spacing": "log",
                    "target_ratio": 3.0}


class ConfigError(ValueError):
    """Invalid run configuration; ``field_name`` is the dotted key at fault."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message if field_name is None else f"{field_name}: {message}")
        self.field_name = field_name


@dataclass(frozen=True)
class OptimizerSettings:
    max_iters: int = 500
    move_limit: float = 0.2
    tol: float = 0.01


@dataclass
class RunConfig:
    """Everything needed to reproduce a run.

    ``schedule`` is either an explicit strictly decreasing list of
    temperatures or a dict with ``t_hi`` (number or ``"auto"``), ``t_lo`` or
    ``t_lo_factor``, ``count`` and ``spacing``.
    """

    problem: ProblemSpec
    thermostat: ThermostatParams = field(default_factory=lambda: ThermostatParams(1.0))
    schedule: list[float] | dict = field(default_factory=lambda: dict(DEFAULT_SCHEDULE))
    sampling: SamplingParams = field(default_factory=SamplingParams)
    reference_sampling: SamplingParams | None = None
    anneal: bool = True
    seed: int = 0
    output_dir: str = "run"
    jobs: int = 1
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    @property
    def reference(self) -> SamplingParams:
        return self.reference_sampling or self.sampling

    def to_dict(self) -> dict[str, Any]:
        th = self.thermostat.to_dict()
        th.pop("target_temperature")
        return {
            "problem": self.problem.to_dict(),
            "thermostat": th,
            "schedule": list(self.schedule) if isinstance(self.schedule, list) else dict(self.schedule),
            "sampling": self.sampling.to_dict(),
            "reference_sampling": (self.reference_sampling.to_dict()
                                   if self.reference_sampling else None),
            "anneal": self.anneal,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "jobs": self.jobs,
            "optimizer": {"max_iters": self.optimizer.max_iters,
                          "move_limit": self.optimizer.move_limit, "tol": self.optimizer.tol},
        }

    def digest(self) -> str:
        """Hash of everything that affects results (not output_dir or jobs)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        if "problem" not in data:
            raise ConfigError("missing required field", "problem")
        try:
            problem = ProblemSpec.from_dict(data["problem"])
        except ProblemError as exc:
            name = f"problem.{exc.field_name}" if exc.field_name else "problem"
            raise ConfigError(str(exc), name) from exc
        kw: dict[str, Any] = {"problem": problem}
        th = dict(data.get("thermostat") or {})
        th.setdefault("target_temperature", 1.0)
        kw["thermostat"] = _build(ThermostatParams.from_dict, th, "thermostat")
        kw["schedule"] = _check_schedule(data.get("schedule", dict(DEFAULT_SCHEDULE)))
        kw["sampling"] = _build(lambda d: SamplingParams(**d), data.get("sampling") or {},
                                "sampling")
        if data.get("reference_sampling"):
            kw["reference_sampling"] = _build(lambda d: SamplingParams(**d),
                                              data["reference_sampling"], "reference_sampling")
        kw["anneal"] = bool(data.get("anneal", True))
        kw["seed"] = _seed(data.get("seed", 0))
        kw["output_dir"] = str(data.get("output_dir", "run"))
        kw["jobs"] = int(data.get("jobs", 1))
        if kw["jobs"] < 1:
            raise ConfigError("must be >= 1", "jobs")
        kw["optimizer"] = _build(lambda d: OptimizerSettings(**d), data.get("optimizer") or {},
                                 "optimizer")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON ({exc})") from exc
        return cls.from_dict(data)


def _build(factory, d, name):
    try:
        return factory(dict(d))
    except TypeError as exc:
        raise ConfigError(f"unexpected or missing key ({exc})", name) from exc
    except ValueError as exc:
        raise ConfigError(str(exc), name) from exc


def _seed(value) -> int:
    try:
        seed = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError("must be an integer", "seed") from exc
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("must be an unsigned 64-bit integer", "seed")
    return seed


def _check_schedule(s):
    if isinstance(s, list):
        if not s:
            raise ConfigError("explicit schedule must be nonempty", "schedule")
        temps = [float(t) for t in s]
        if any(t <= 0 for t in temps) or any(b >= a for a, b in zip(temps, temps[1:])):
            raise ConfigError("temperatures must be positive and strictly decreasing", "schedule")
        return temps
    if not isinstance(s, dict):
        raise ConfigError("must be a list of temperatures or an object", "schedule")
    out = dict(DEFAULT_SCHEDULE)
    out.update(s)
    if out["spacing"] not in SPACINGS:
        raise ConfigError(f"spacing must be one of {SPACINGS}", "schedule.spacing")
    if int(out["count"]) < 1:
        raise ConfigError("must be >= 1", "schedule.count")
    if out["t_hi"] != "auto" and not float(out["t_hi"]) > 0:
        raise ConfigError("must be positive or 'auto'", "schedule.t_hi")
    return out


def resolve_schedule(schedule, t_hi: float | None = None) -> list[float]:
    """Concrete temperature list; ``t_hi`` supplies the value when the config says ``auto``."""
    if isinstance(schedule, list):
        return list(schedule)
    hi = float(schedule["t_hi"]) if schedule["t_hi"] != "auto" else t_hi
    if hi is None:
        raise ConfigError("t_hi is 'auto' but no probe temperature was supplied", "schedule.t_hi")
    lo = float(schedule["t_lo"]) if schedule.get("t_lo") is not None \
        else hi * float(schedule["t_lo_factor"])
    count = int(schedule["count"])
    if count == 1:
        return [hi]
    if not 0 < lo < hi:
        raise ConfigError("need 0 < t_lo < t_hi", "schedule.t_lo")
    make = log_schedule if schedule["spacing"] == "log" else linear_schedule
    return make(hi, lo, count)
