"""Constant-temperature dynamics of the lifted design field.

Each site density ``x_e`` is treated as a particle position with conjugate
momentum ``p_e`` and Hamiltonian ``H = sum(p**2) + C(x)``, so ``dx/dt = 2p``
and the Gaussian momentum weight ``exp(-p**2 / T)`` gives ``<p_e**2> = T/2``.
A Nose-Hoover chain couples the kinetic energy to a heat bath at ``T`` and the
total volume ``sum(x) = V0`` is held by a Lagrange multiplier recomputed every
step. Densities stay in ``[0, 1]`` through elastic reflection inside the
constraint plane.

The integrator is the usual symmetric Trotter splitting: thermostat half step,
velocity-Verlet core, thermostat half step, with Suzuki-Yoshida weights on the
thermostat propagator.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .problem import ProblemSpec, fe_model

CHECKPOINT_VERSION = 1

_SY_WEIGHTS = {
    1: (1.0,),
    3: (1 / (2 - 2 ** (1 / 3)), 1 - 2 / (2 - 2 ** (1 / 3)), 1 / (2 - 2 ** (1 / 3))),
    5: tuple([1 / (4 - 4 ** (1 / 3))] * 2 + [1 - 4 / (4 - 4 ** (1 / 3))]
             + [1 / (4 - 4 ** (1 / 3))] * 2),
}


class DynamicsError(RuntimeError):
    """Raised when a step cannot be completed (non-finite force, runaway reflections)."""


class ConstraintError(ValueError):
    """The volume constraint cannot be met within the box bounds."""


@dataclass(frozen=True)
class ThermostatParams:
    """Nose-Hoover chain settings.

    Chain masses default to ``Q_1 = N T tau**2`` and ``Q_k = T tau**2`` with
    ``tau = 100 * timestep`` unless ``relaxation_time`` or explicit ``masses``
    are given.
    """

    target_temperature: float
    chain_length: int = 2
    timestep: float = 0.01
    relaxation_time: float | None = None
    masses: tuple[float, ...] | None = None
    sy_order: int = 3

    def __post_init__(self):
        if not self.target_temperature > 0:
            raise ValueError("target_temperature must be > 0")
        if not self.timestep > 0:
            raise ValueError("timestep must be > 0")
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if self.sy_order not in _SY_WEIGHTS:
            raise ValueError(f"sy_order must be one of {sorted(_SY_WEIGHTS)}")
        if self.masses is not None:
            object.__setattr__(self, "masses", tuple(float(q) for q in self.masses))
            if len(self.masses) != self.chain_length or min(self.masses) <= 0:
                raise ValueError("masses must be chain_length positive values")
        if self.relaxation_time is not None and not self.relaxation_time > 0:
            raise ValueError("relaxation_time must be > 0")

    @property
    def tau(self) -> float:
        return self.relaxation_time if self.relaxation_time is not None else 100 * self.timestep

    def chain_masses(self, n_sites: int) -> np.ndarray:
        if self.masses is not None:
            return np.array(self.masses)
        q = np.full(self.chain_length, self.target_temperature * self.tau ** 2)
        q[0] *= n_sites
        return q

    def at_temperature(self, temperature: float) -> "ThermostatParams":
        return dataclasses.replace(self, target_temperature=float(temperature))

    def to_dict(self) -> dict:
        return {"target_temperature": self.target_temperature, "chain_length": self.chain_length,
                "timestep": self.timestep, "relaxation_time": self.relaxation_time,
                "masses": list(self.masses) if self.masses is not None else None,
                "sy_order": self.sy_order}

    @classmethod
    def from_dict(cls, d: dict) -> "ThermostatParams":
        d = dict(d)
        if d.get("masses") is not None:
            d["masses"] = tuple(d["masses"])
        return cls(**d)


@dataclass
class DynamicState:
    """Full sampler state. Arrays are owned by the state and mutated in place by
    :class:`NHCIntegrator`."""

    x: np.ndarray
    momenta: np.ndarray
    chain_positions: np.ndarray
    chain_velocities: np.ndarray
    lagrange_multiplier: float = 0.0
    step_count: int = 0
    seed: int | None = None
    compliance: float = field(default=math.nan, repr=False)
    force: np.ndarray | None = field(default=None, repr=False)

    def copy(self) -> "DynamicState":
        return DynamicState(
            x=self.x.copy(), momenta=self.momenta.copy(),
            chain_positions=self.chain_positions.copy(),
            chain_velocities=self.chain_velocities.copy(),
            lagrange_multiplier=self.lagrange_multiplier, step_count=self.step_count,
            seed=self.seed, compliance=self.compliance,
            force=None if self.force is None else self.force.copy())

    @property
    def kinetic_energy(self) -> float:
        return float(np.dot(self.momenta, self.momenta))


def project_volume_constraint(x, target: float, lower: float = 0.0, upper: float = 1.0,
                              tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Shift the bound-free entries of ``x`` uniformly so that ``sum(x) == target``.

    Entries sitting on the bound the shift would push them through are left
    alone; anything a shift carries past a bound is clipped and the remainder
    redistributed. This is the minimal-norm correction over the free entries.
    """
    x = np.array(x, dtype=float)
    # summation roundoff sets a floor below which the deficit cannot be driven
    floor = 4 * np.finfo(float).eps * max(abs(target), 1.0) * math.sqrt(x.size)
    for _ in range(max_iter):
        deficit = target - x.sum()
        if abs(deficit) <= max(tol, floor):
            return x
        free = x < upper if deficit > 0 else x > lower
        n_free = int(free.sum())
        if n_free == 0:
            raise ConstraintError(
                f"cannot reach volume {target}: all {x.size} entries saturated (sum {x.sum()})")
        x[free] += deficit / n_free
        np.clip(x, lower, upper, out=x)
    raise ConstraintError(f"volume projection did not converge in {max_iter} iterations")


def _first_contact(y: float, w: float, a: float, b: float, tau: float) -> float:
    """Earliest t in (0, tau] with y + w t + a t^2 / 2 = b, or inf."""
    c = y - b
    if a == 0.0:
        if w == 0.0:
            return math.inf
        roots = ((b - y) / w,)
    else:
        disc = w * w - 2.0 * a * c
        if disc < 0.0:
            return math.inf
        q = -0.5 * (w + math.copysign(math.sqrt(disc), w))
        roots = (q / (0.5 * a), c / q) if q != 0.0 else (-w / (0.5 * a),)
    good = [t for t in roots if 0.0 < t <= tau]
    return min(good) if good else math.inf


def _bouncing_ball(y: float, w: float, a: float, tau: float, max_events: int):
    """Position and velocity after ``tau`` of constant acceleration in [0, 1]."""
    for _ in range(max_events):
        t0, t1 = _first_contact(y, w, a, 0.0, tau), _first_contact(y, w, a, 1.0, tau)
        t = min(t0, t1)
        if not math.isfinite(t):
            return y + w * tau + 0.5 * a * tau * tau, w + a * tau
        wall = 0.0 if t0 <= t1 else 1.0
        w = -(w + a * t)
        y, tau = wall, tau - t
        if (a < 0.0) if wall == 0.0 else (a > 0.0):
            # resting contact: equal hops repeat with period 2|w|/|a|
            if w == 0.0:
                return wall, 0.0
            if w * w < 2.0 * abs(a):
                period = 2.0 * abs(w / a)
                tau -= period * math.floor(tau / period)
    raise DynamicsError(
        f"wall contacts did not settle within {max_events} events; reduce the timestep")


class NHCIntegrator:
    """Time-reversible Nose-Hoover-chain integrator with a hard volume constraint.

    Parameters
    ----------
    spec : ProblemSpec
        Problem supplying the compliance potential and target volume.
    params : ThermostatParams
        Thermostat and step settings.
    zero_force : bool
        Drop the compliance force (flat landscape); constraint and bounds
        remain active. Used for the maximum-entropy reference.
    """

    max_reflections = 100

    def __init__(self, spec: ProblemSpec, params: ThermostatParams, zero_force: bool = False):
        self.spec = spec
        self.params = params
        self.zero_force = zero_force or not spec.has_load
        self.n = spec.n_elements
        self.n_dof = self.n - 1
        self.target_volume = spec.target_volume
        self.masses = params.chain_masses(self.n)
        self._weights = _SY_WEIGHTS[params.sy_order]
        self._model = None if self.zero_force else fe_model(spec)

    def evaluate(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Potential (compliance) and force ``-dC/dx``."""
        if self.zero_force:
            return 0.0, np.zeros(self.n)
        c, g = self._model.compliance_and_gradient(x)
        return c, -g

    def initialize(self, seed: int) -> DynamicState:
        rng = np.random.default_rng(seed)
        x = np.full(self.n, self.spec.volume_fraction)
        x = project_volume_constraint(x, self.target_volume)
        p = rng.normal(0.0, math.sqrt(self.params.target_temperature / 2), self.n)
        p -= p.mean()
        m = self.params.chain_length
        state = DynamicState(x=x, momenta=p, chain_positions=np.zeros(m),
                             chain_velocities=np.zeros(m), seed=seed)
        self.refresh(state)
        return state

    def refresh(self, state: DynamicState) -> None:
        """Recompute the cached potential and force for ``state.x``."""
        state.compliance, state.force = self.evaluate(state.x)
        state.lagrange_multiplier = float(state.force.mean())

    # -- energies -------------------------------------------------------------

    def hamiltonian(self, state: DynamicState) -> float:
        if math.isnan(state.compliance):
            self.refresh(state)
        return state.kinetic_energy + state.compliance

    def extended_hamiltonian(self, state: DynamicState) -> float:
        t = self.params.target_temperature
        q, v, s = self.masses, state.chain_velocities, state.chain_positions
        return (self.hamiltonian(state) + 0.5 * float(np.dot(q, v * v))
                + self.n_dof * t * s[0] + t * float(s[1:].sum()))

    # -- propagation ----------------------------------------------------------

    def step(self, state: DynamicState) -> DynamicState:
        """Advance ``state`` by one step in place and return it."""
        if state.force is None:
            self.refresh(state)
        dt = self.params.timestep
        half = 0.5 * dt
        p, x = state.momenta, state.x

        self._thermostat(state, half)
        lam = float(state.force.mean())
        f0 = state.force - lam
        # drift under the frozen force f0: identical to velocity Verlet away
        # from the walls, with exact elastic bounces for sites that hit them
        x_new = x + 2.0 * dt * p + dt * dt * f0
        p_new = p + dt * f0
        self._bounce(x, p, f0, x_new, p_new, dt)
        self._reflect(x_new, p_new)
        if abs(self.target_volume - x_new.sum()) > 1e-12:
            x_new = project_volume_constraint(x_new, self.target_volume, tol=1e-13)
        x[:] = x_new
        p[:] = p_new - half * f0

        c, force = self.evaluate(x)
        if not (math.isfinite(c) and np.all(np.isfinite(force))):
            raise DynamicsError(
                f"non-finite force at step {state.step_count + 1} "
                f"(C={c}, min x={x.min():.3g}, max |p|={np.abs(p).max():.3g})")
        p += half * (force - force.mean())
        p -= p.mean()
        self._thermostat(state, half)

        state.compliance, state.force = c, force
        state.lagrange_multiplier = lam
        state.step_count += 1
        return state

    def run(self, state: DynamicState, n_steps: int, callback=None) -> DynamicState:
        for _ in range(n_steps):
            self.step(state)
            if callback is not None:
                callback(state)
        return state

    def _bounce(self, x0, p0, f0, x1, p1, dt) -> None:
        # Inside the constraint plane coordinate i obeys dx_i/dt = 2 p_i,
        # dp_i/dt = f_i, and a reflection only flips the normal component,
        # whose i-th entry is p_i. Each site whose parabola leaves the box is
        # therefore a one-dimensional bouncing ball; the other sites take
        # -1/(n-1) of its correction so volume and sum(p) stay fixed.
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ext = np.where(f0 != 0.0, -p0 / f0, -1.0)
            inner = (t_ext > 0.0) & (t_ext < dt)
            ext = np.where(inner, x0 - p0 * p0 / f0, x0)
        hit = (x1 < 0.0) | (x1 > 1.0) | (ext < 0.0) | (ext > 1.0)
        if not hit.any():
            return
        n = self.n
        xf, pf = x1.copy(), p1.copy()
        # reflections do not commute, so compose them in the order the walls
        # are reached; index order would heat the low-index sites
        sites = np.flatnonzero(hit)
        t_hit = [min(_first_contact(x0[i], 2.0 * p0[i], 2.0 * f0[i], 0.0, dt),
                     _first_contact(x0[i], 2.0 * p0[i], 2.0 * f0[i], 1.0, dt)) for i in sites]
        for i in sites[np.argsort(t_hit, kind="stable")]:
            # carry the shifts earlier bounces passed to this site so that each
            # bounce flips the current normal momentum, as a mirror would
            y0 = min(max(float(x0[i] + x1[i] - xf[i]), 0.0), 1.0)
            q0 = float(p0[i] + p1[i] - pf[i])
            y, w = _bouncing_ball(y0, 2.0 * q0, 2.0 * float(f0[i]), dt, self.max_reflections)
            dx, dp = y - x1[i], 0.5 * w - p1[i]
            x1 -= dx / (n - 1)
            x1[i] += dx + dx / (n - 1)
            p1 -= dp / (n - 1)
            p1[i] += dp + dp / (n - 1)

    def _reflect(self, x: np.ndarray, p: np.ndarray) -> None:
        # Mirror across the face {x_i = bound} inside the plane sum(x) = V0: the
        # face normal projected into the plane is e_i - 1/n, so site i flips
        # and every other site absorbs 2*overshoot/(n-1) of position and
        # 2*p_i/(n-1) of momentum. Volume, sum(p) and |p| are preserved.
        # Each pass handles every out-of-box site, worst overshoot first; the
        # iteration bound counts passes.
        n = self.n
        for _ in range(self.max_reflections):
            over = np.flatnonzero((x < 0.0) | (x > 1.0))
            if over.size == 0:
                return
            depth = np.maximum(-x[over], x[over] - 1.0)
            for i in over[np.argsort(-depth, kind="stable")]:
                if x[i] < 0.0:
                    g, outward = x[i], p[i] < 0.0
                elif x[i] > 1.0:
                    g, outward = x[i] - 1.0, p[i] > 0.0
                else:
                    continue
                shift = 2.0 * g / (n - 1)
                x += shift
                x[i] -= 2.0 * g + shift
                if outward:
                    pn = p[i] - p.mean()
                    kick = 2.0 * pn / (n - 1)
                    p += kick
                    p[i] -= 2.0 * pn + kick
        raise DynamicsError(
            f"box reflections did not settle within {self.max_reflections} passes; "
            "reduce the timestep")

    def _thermostat(self, state: DynamicState, h: float) -> None:
        t = self.params.target_temperature
        q = self.masses
        v = state.chain_velocities
        s = state.chain_positions
        m = v.size
        nf_t = self.n_dof * t
        p = state.momenta
        ke2 = 2.0 * float(np.dot(p, p))
        scale = 1.0
        try:
            for w in self._weights:
                d = w * h
                # outer half: top of chain down to the first thermostat
                v[m - 1] += 0.5 * d * self._chain_force(m - 1, v, q, ke2, nf_t, t)
                for k in range(m - 2, -1, -1):
                    a = math.exp(-0.25 * d * v[k + 1])
                    v[k] = (v[k] * a + 0.5 * d * self._chain_force(k, v, q, ke2, nf_t, t)) * a
                f = math.exp(-d * v[0])
                scale *= f
                ke2 *= f * f
                s += d * v
                for k in range(m - 1):
                    a = math.exp(-0.25 * d * v[k + 1])
                    v[k] = (v[k] * a + 0.5 * d * self._chain_force(k, v, q, ke2, nf_t, t)) * a
                v[m - 1] += 0.5 * d * self._chain_force(m - 1, v, q, ke2, nf_t, t)
        except OverflowError:
            scale = math.inf
        if not (math.isfinite(scale) and all(map(math.isfinite, v))):
            raise DynamicsError(f"thermostat chain diverged at T={t:.4g}; reduce the timestep")
        p *= scale

    @staticmethod
    def _chain_force(k, v, q, ke2, nf_t, t):
        if k == 0:
            return (ke2 - nf_t) / q[0]
        return (q[k - 1] * v[k - 1] ** 2 - t) / q[k]


# -- functional surface -------------------------------------------------------

def initialize(spec: ProblemSpec, params: ThermostatParams, seed: int,
               zero_force: bool = False) -> DynamicState:
    return NHCIntegrator(spec, params, zero_force).initialize(seed)


def step(state: DynamicState, params: ThermostatParams, spec: ProblemSpec,
         zero_force: bool = False) -> DynamicState:
    """Return a new state one step ahead; ``state`` is left untouched."""
    return NHCIntegrator(spec, params, zero_force).step(state.copy())


def hamiltonian(state: DynamicState, spec: ProblemSpec, zero_force: bool = False) -> float:
    integ = NHCIntegrator(spec, ThermostatParams(1.0), zero_force)
    c, _ = integ.evaluate(state.x)
    return state.kinetic_energy + c


def extended_hamiltonian(state: DynamicState, params: ThermostatParams, spec: ProblemSpec,
                         zero_force: bool = False) -> float:
    integ = NHCIntegrator(spec, params, zero_force)
    fresh = state.copy()
    integ.refresh(fresh)
    return integ.extended_hamiltonian(fresh)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, state: DynamicState, spec: ProblemSpec,
                    params: ThermostatParams) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "spec_hash": spec.digest(),
        "params": params.to_dict(),
        "x": state.x.tolist(),
        "momenta": state.momenta.tolist(),
        "chain_positions": state.chain_positions.tolist(),
        "chain_velocities": state.chain_velocities.tolist(),
        "lagrange_multiplier": state.lagrange_multiplier,
        "step_count": state.step_count,
        "seed": state.seed,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, spec: ProblemSpec) -> tuple[DynamicState, ThermostatParams]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    if doc["spec_hash"] != spec.digest():
        raise ValueError("checkpoint was written for a different problem")
    state = DynamicState(
        x=np.array(doc["x"]), momenta=np.array(doc["momenta"]),
        chain_positions=np.array(doc["chain_positions"]),
        chain_velocities=np.array(doc["chain_velocities"]),
        lagrange_multiplier=doc["lagrange_multiplier"], step_count=doc["step_count"],
        seed=doc["seed"])
    return state, ThermostatParams.from_dict(doc["params"])
