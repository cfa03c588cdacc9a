"""Temperature sweeps over canonical ensembles of designs.

For each temperature the sampler is equilibrated, then every ``stride``-th
step is recorded into per-site density histograms and running moments of the
compliance and the volume pressure.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DynamicState, NHCIntegrator, ThermostatParams
from .problem import ProblemSpec, fe_model

log = logging.getLogger(__name__)

OBSERVABLES = ("design", "physical")


class MissingReferenceError(ValueError):
    """A compliance ratio was requested without a positive ``C_min``."""


@dataclass(frozen=True)
class SamplingParams:
    n_equil: int = 50_000
    n_samples: int = 2_000
    stride: int = 25
    bins: int = 32
    observable: str = "physical"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.n_equil < 0:
            raise ValueError("n_equil must be >= 0")
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.observable not in OBSERVABLES:
            raise ValueError(f"observable must be one of {OBSERVABLES}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EnsembleStats:
    """Observables accumulated at one temperature.

    ``density_histograms`` and ``mean_observed_density`` refer to the sampled
    ``observable`` (``"design"``: the sampler coordinates, ``"physical"``:
    their filtered image); ``mean_density`` is always the design field.
    """

    temperature: float
    n_samples: int
    mean_density: np.ndarray
    mean_physical_density: np.ndarray
    density_histograms: np.ndarray
    mean_compliance: float
    compliance_second_moment: float
    compliance_stderr: float
    mean_pressure: float
    pressure_stderr: float
    mean_momentum_sq: np.ndarray
    observable: str = "physical"
    c_min_reference: float | None = None
    seed: int | None = None
    equilibrated: bool = True
    equilibration_z: float = 0.0
    n_steps: int = 0

    @property
    def bins(self) -> int:
        return self.density_histograms.shape[1]

    @property
    def mean_observed_density(self) -> np.ndarray:
        return self.mean_physical_density if self.observable == "physical" else self.mean_density

    @property
    def compliance_variance(self) -> float:
        return max(0.0, self.compliance_second_moment - self.mean_compliance ** 2)

    def summary(self) -> dict:
        d = {"T": self.temperature, "mean_compliance": self.mean_compliance,
             "compliance_second_moment": self.compliance_second_moment,
             "compliance_stderr": self.compliance_stderr,
             "mean_pressure": self.mean_pressure, "pressure_stderr": self.pressure_stderr,
             "n_samples": self.n_samples, "n_steps": self.n_steps, "seed": self.seed,
             "equilibrated": self.equilibrated, "equilibration_z": self.equilibration_z,
             "observable": self.observable, "bins": self.bins,
             "c_min": self.c_min_reference}
        d["compliance_ratio"] = (self.mean_compliance / self.c_min_reference
                                 if self.c_min_reference else None)
        return d


@dataclass
class SweepSeries:
    """Ensemble statistics ordered by strictly decreasing temperature."""

    spec: ProblemSpec
    entries: list[EnsembleStats] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def __post_init__(self):
        temps = [e.temperature for e in self.entries]
        if any(b >= a for a, b in zip(temps, temps[1:])):
            raise ValueError("sweep temperatures must be strictly decreasing")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def temperatures(self) -> np.ndarray:
        return np.array([e.temperature for e in self.entries])

    @property
    def mean_compliance(self) -> np.ndarray:
        return np.array([e.mean_compliance for e in self.entries])

    @property
    def compliance_stderr(self) -> np.ndarray:
        return np.array([e.compliance_stderr for e in self.entries])

    @property
    def mean_pressure(self) -> np.ndarray:
        return np.array([e.mean_pressure for e in self.entries])

    def compliance_ratio(self) -> np.ndarray:
        return np.array([compliance_ratio(e) for e in self.entries])


def compliance_ratio(stats: EnsembleStats) -> float:
    """``<C> / C_min`` for one temperature."""
    c_min = stats.c_min_reference
    if c_min is None or not c_min > 0:
        raise MissingReferenceError(
            "compliance ratio needs a positive C_min reference (run the optimizer first)")
    return stats.mean_compliance / c_min


def derive_seed(master: int, index: int) -> int:
    """Per-temperature seed from the master seed and the schedule index."""
    digest = hashlib.sha256(f"{int(master)}:{int(index)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def batch_stderr(samples: np.ndarray, n_batches: int = 20) -> float:
    """Standard error of the mean by non-overlapping batch means."""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n < 2:
        return 0.0
    b = min(n_batches, n)
    size = n // b
    means = samples[: b * size].reshape(b, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(b))


class _Accumulator:
    def __init__(self, n_sites: int, n_samples: int, bins: int):
        self.bins = bins
        self.sum_x = np.zeros(n_sites)
        self.sum_xphys = np.zeros(n_sites)
        self.sum_p2 = np.zeros(n_sites)
        self.hist = np.zeros((n_sites, bins), dtype=np.int64)
        self.c = np.empty(n_samples)
        self.lam = np.empty(n_samples)
        self.k = 0
        self._rows = np.arange(n_sites)

    def add(self, state: DynamicState, xphys: np.ndarray, observed: np.ndarray):
        self.sum_x += state.x
        self.sum_xphys += xphys
        self.sum_p2 += state.momenta ** 2
        idx = np.minimum((observed * self.bins).astype(np.int64), self.bins - 1)
        np.maximum(idx, 0, out=idx)
        self.hist[self._rows, idx] += 1
        self.c[self.k] = state.compliance
        self.lam[self.k] = state.lagrange_multiplier
        self.k += 1


def sample_at_temperature(spec: ProblemSpec, params: ThermostatParams, n_equil: int,
                          n_samples: int, sample_stride: int, seed: int,
                          warm_start: DynamicState | None = None, *, bins: int = 32,
                          observable: str = "physical", c_min: float | None = None,
                          zero_force: bool = False) -> tuple[EnsembleStats, DynamicState]:
    """Equilibrate for ``n_equil`` steps, then record every ``sample_stride``-th step.

    With ``warm_start`` the trajectory continues from a copy of that state
    (thermostat chain reset, since its masses depend on ``T``); otherwise it
    starts from the uniform design with momenta drawn from ``seed``.
    """
    sampling = SamplingParams(n_equil, n_samples, sample_stride, bins, observable)
    integ = NHCIntegrator(spec, params, zero_force=zero_force)
    if warm_start is None:
        state = integ.initialize(seed)
    else:
        state = warm_start.copy()
        state.chain_positions[:] = 0.0
        state.chain_velocities[:] = 0.0
        integ.refresh(state)
    integ.run(state, sampling.n_equil)

    model = fe_model(spec)
    acc = _Accumulator(spec.n_elements, n_samples, bins)
    for _ in range(n_samples):
        integ.run(state, sample_stride)
        xphys = model.filter(state.x)
        acc.add(state, xphys, xphys if observable == "physical" else state.x)

    c, lam = acc.c, acc.lam
    mean_c = float(c.mean())
    half = n_samples // 2
    z = 0.0
    if half >= 2:
        a, b = c[:half], c[half:2 * half]
        se = math.hypot(batch_stderr(a, 10), batch_stderr(b, 10))
        diff = abs(a.mean() - b.mean())
        z = float(diff / se) if se > 0 else (0.0 if diff == 0 else math.inf)
    equilibrated = z <= 3.0
    if not equilibrated:
        log.warning("T=%.4g: <C> halves differ by %.1f standard errors; not equilibrated",
                    params.target_temperature, z)
    stats = EnsembleStats(
        temperature=params.target_temperature, n_samples=n_samples,
        mean_density=acc.sum_x / n_samples, mean_physical_density=acc.sum_xphys / n_samples,
        density_histograms=acc.hist, mean_compliance=mean_c,
        compliance_second_moment=float(np.mean(c * c)),
        compliance_stderr=batch_stderr(c), mean_pressure=float(lam.mean()),
        pressure_stderr=batch_stderr(lam), mean_momentum_sq=acc.sum_p2 / n_samples,
        observable=observable, c_min_reference=c_min, seed=seed,
        equilibrated=equilibrated, equilibration_z=z,
        n_steps=sampling.n_equil + n_samples * sample_stride)
    return stats, state


def _sample_job(args):
    spec, params, sampling, seed, c_min, zero_force = args
    stats, _ = sample_at_temperature(
        spec, params, sampling.n_equil, sampling.n_samples, sampling.stride, seed,
        bins=sampling.bins, observable=sampling.observable, c_min=c_min,
        zero_force=zero_force)
    return stats


def run_sweep(spec: ProblemSpec, schedule, sampling: SamplingParams | None = None,
              thermostat: ThermostatParams | None = None, anneal: bool = True,
              seed: int = 0, c_min: float | None = None, jobs: int = 1,
              zero_force: bool = False, progress=None) -> SweepSeries:
    """Sample every temperature of a strictly decreasing schedule.

    Annealed sweeps warm-start each temperature from the previous final state
    and run sequentially; otherwise temperatures are independent and may be
    spread over ``jobs`` worker processes. A failing temperature is recorded
    in ``SweepSeries.failures`` and the sweep carries on.
    """
    schedule = [float(t) for t in schedule]
    if not schedule:
        raise ValueError("schedule must be nonempty")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly decreasing")
    sampling = sampling or SamplingParams()
    base = thermostat or ThermostatParams(schedule[0])
    seeds = [derive_seed(seed, i) for i in range(len(schedule))]
    series = SweepSeries(spec=spec, provenance={
        "master_seed": int(seed), "seeds": seeds, "anneal": bool(anneal),
        "sampling": sampling.to_dict(), "thermostat": base.to_dict()})

    entries: list[EnsembleStats | None] = [None] * len(schedule)
    if anneal or jobs <= 1:
        state = None
        for i, t in enumerate(schedule):
            params = base.at_temperature(t)
            try:
                stats, new_state = sample_at_temperature(
                    spec, params, sampling.n_equil, sampling.n_samples, sampling.stride,
                    seeds[i], warm_start=state if anneal else None, bins=sampling.bins,
                    observable=sampling.observable, c_min=c_min, zero_force=zero_force)
            except Exception as exc:  # noqa: BLE001 - reported per temperature
                log.error("temperature %.4g failed: %s", t, exc)
                series.failures.append({"index": i, "T": t, "error": repr(exc)})
                state = None
                continue
            entries[i] = stats
            state = new_state if anneal else None
            if progress is not None:
                progress(i, stats)
    else:
        jobs_args = [(spec, base.at_temperature(t), sampling, seeds[i], c_min, zero_force)
                     for i, t in enumerate(schedule)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_sample_job, a) for a in jobs_args]
            for i, fut in enumerate(futures):
                try:
                    entries[i] = fut.result()
                except Exception as exc:  # noqa: BLE001
                    series.failures.append({"index": i, "T": schedule[i], "error": repr(exc)})
                    continue
                if progress is not None:
                    progress(i, entries[i])
    series.provenance["indices"] = [i for i, e in enumerate(entries) if e is not None]
    series.provenance["schedule"] = schedule
    series.entries = [e for e in entries if e is not None]
    return series


def log_schedule(t_hi: float, t_lo: float, count: int) -> list[float]:
    return [float(t) for t in np.geomspace(t_hi, t_lo, count)]


def linear_schedule(t_hi: float, t_lo: float, count: int) -> list[float]:
    return [float(t) for t in np.linspace(t_hi, t_lo, count)]


def auto_temperature_high(spec: ProblemSpec, c_min: float, thermostat: ThermostatParams | None = None,
                          target_ratio: float = 3.0, probe: SamplingParams | None = None,
                          seed: int = 0, t_start: float | None = None,
                          max_doublings: int = 12) -> float:
    """Smallest probed temperature (doubling from ``t_start``) with ``<C>/C_min >= target_ratio``."""
    if not c_min > 0:
        raise MissingReferenceError("auto temperature needs a positive C_min")
    probe = probe or SamplingParams(n_equil=5_000, n_samples=200, stride=25)
    base = thermostat or ThermostatParams(1.0)
    t = t_start if t_start is not None else c_min / spec.n_elements
    for k in range(max_doublings + 1):
        stats, _ = sample_at_temperature(
            spec, base.at_temperature(t), probe.n_equil, probe.n_samples, probe.stride,
            derive_seed(seed, 10_000 + k), bins=probe.bins, observable=probe.observable,
            c_min=c_min)
        ratio = stats.mean_compliance / c_min
        log.info("probe T=%.4g  <C>/C_min=%.3f", t, ratio)
        if ratio >= target_ratio:
            return t
        t *= 2.0
    raise RuntimeError(f"no probe temperature reached ratio {target_ratio}")
