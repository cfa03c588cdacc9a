"""Zero-temperature reference: optimality-criteria topology optimization.

Same scheme as the 88-line code (move limit 0.2, damping 0.5, density filter)
except that the volume is held on the design field, ``sum(x) == V0``, which is
the constraint the sampler enforces. ``C_min`` is therefore directly
comparable with sampled mean compliances.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .problem import ProblemSpec, fe_model

log = logging.getLogger(__name__)


@dataclass
class OptimizationResult:
    x_star: np.ndarray
    c_min: float
    iterations: int
    converged: bool
    change_history: list[float] = field(default_factory=list)
    compliance_history: list[float] = field(default_factory=list)
    # iterations where compliance rose by more than 1 %
    flagged_iterations: list[int] = field(default_factory=list)


def oc_update(x: np.ndarray, dc: np.ndarray, target_volume: float,
              move: float = 0.2, damping: float = 0.5) -> np.ndarray:
    """One optimality-criteria update with bisection on the volume multiplier."""
    sens = np.maximum(-dc, 0.0)
    if not np.any(sens > 0):
        return x.copy()
    lo, hi = x - move, x + move
    np.clip(lo, 0.0, 1.0, out=lo)
    np.clip(hi, 0.0, 1.0, out=hi)

    def trial(lmid):
        return np.clip(x * (sens / lmid) ** damping, lo, hi)

    # bracket in log space; the volume is non-increasing in the multiplier
    l1, l2 = 1e-30, 1e30
    for _ in range(400):
        lmid = np.sqrt(l1 * l2)
        xnew = trial(lmid)
        vol = xnew.sum()
        if abs(vol - target_volume) < 1e-12 * max(1.0, target_volume):
            break
        if vol > target_volume:
            l1 = lmid
        else:
            l2 = lmid
        if l2 / l1 - 1.0 < 1e-15:
            break
    # close any residual gap over the free entries
    gap = target_volume - xnew.sum()
    if gap != 0.0:
        free = (xnew < hi) if gap > 0 else (xnew > lo)
        if free.any():
            xnew[free] += gap / free.sum()
            np.clip(xnew, lo, hi, out=xnew)
    return xnew


def optimize(spec: ProblemSpec, max_iters: int = 500, move_limit: float = 0.2,
             tol: float = 0.01, damping: float = 0.5, x0=None) -> OptimizationResult:
    """Minimize compliance by optimality criteria.

    Converged when the largest per-site change of an iteration drops below
    ``tol``. On non-convergence the lowest-compliance iterate is returned
    with ``converged=False``.
    """
    model = fe_model(spec)
    x = np.full(spec.n_elements, spec.volume_fraction) if x0 is None else np.array(x0, float)
    v0 = spec.target_volume
    result = OptimizationResult(x_star=x.copy(), c_min=np.inf, iterations=0, converged=False)
    best_c, best_x = np.inf, x.copy()
    prev_c = None
    for it in range(1, max_iters + 1):
        c, dc = model.compliance_and_gradient(x)
        result.compliance_history.append(c)
        if prev_c is not None and c > prev_c * 1.01:
            result.flagged_iterations.append(it)
        prev_c = c
        if c < best_c:
            best_c, best_x = c, x.copy()
        xnew = oc_update(x, dc, v0, move_limit, damping)
        change = float(np.abs(xnew - x).max())
        result.change_history.append(change)
        x = xnew
        result.iterations = it
        log.debug("it %3d  C=%.6g  change=%.4f", it, c, change)
        if change < tol:
            result.converged = True
            break
    c_final = model.compliance(x)
    if result.converged or c_final <= best_c:
        result.x_star, result.c_min = x, c_final
    else:
        result.x_star, result.c_min = best_x, best_c
    if spec.has_load and not result.converged:
        log.warning("OC did not converge in %d iterations (last change %.3g)",
                    max_iters, result.change_history[-1])
    return result


@dataclass
class AnnealReport:
    """Low-temperature limit of an annealed sweep against the OC reference."""

    c_min: float
    temperatures: np.ndarray
    ratios: np.ndarray
    final_ratio: float
    mean_abs_deviation: float
    max_abs_deviation: float
    series: object = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"c_min": self.c_min, "temperatures": self.temperatures.tolist(),
                "ratios": self.ratios.tolist(), "final_ratio": self.final_ratio,
                "mean_abs_deviation": self.mean_abs_deviation,
                "max_abs_deviation": self.max_abs_deviation}


def compare_to_reference(series, reference: OptimizationResult) -> AnnealReport:
    """Ratios ``<C>/C_min`` along a sweep and ``|<x> - x*|`` at its coldest point."""
    from .ensemble import MissingReferenceError

    if not reference.c_min > 0:
        raise MissingReferenceError("C_min is zero (no load); compliance ratio is undefined")
    if len(series) == 0:
        raise ValueError("sweep has no successful temperatures")
    ratios = series.mean_compliance / reference.c_min
    dev = np.abs(series.entries[-1].mean_density - reference.x_star)
    return AnnealReport(reference.c_min, series.temperatures, ratios, float(ratios[-1]),
                        float(dev.mean()), float(dev.max()), series)


def anneal_compare(spec: ProblemSpec, schedule, sampling=None, thermostat=None, seed: int = 0,
                   reference: OptimizationResult | None = None) -> AnnealReport:
    """Anneal down ``schedule`` and compare the coldest ensemble with the OC optimum."""
    from .ensemble import MissingReferenceError, run_sweep

    reference = reference or optimize(spec)
    if not reference.c_min > 0:
        raise MissingReferenceError("C_min is zero (no load); compliance ratio is undefined")
    series = run_sweep(spec, schedule, sampling, thermostat, anneal=True, seed=seed,
                       c_min=reference.c_min)
    return compare_to_reference(series, reference)


# -- exhaustive oracle --------------------------------------------------------------

class EnumerationBudgetError(RuntimeError):
    """The discretized design set is larger than the allowed budget."""


@dataclass
class BruteForceResult:
    x_best: np.ndarray
    c_best: float
    n_designs: int
    levels: tuple[float, ...]


def count_level_designs(n_sites: int, n_levels: int, total: int) -> int:
    """Number of integer vectors in ``[0, n_levels - 1]**n_sites`` summing to ``total``."""
    coeffs = [1]
    for _ in range(n_sites):
        nxt = [0] * (len(coeffs) + n_levels - 1)
        for i, c in enumerate(coeffs):
            for k in range(n_levels):
                nxt[i + k] += c
        coeffs = nxt
    return coeffs[total] if 0 <= total < len(coeffs) else 0


def _level_vectors(n: int, k_max: int, total: int, chunk: int):
    """Yield ``(B, n)`` blocks of all integer vectors in ``[0, k_max]**n`` summing to ``total``."""
    left = n // 2
    grids = []
    for m in (left, n - left):
        g = np.array(list(itertools.product(range(k_max + 1), repeat=m)), dtype=np.int8)
        g = g.reshape(-1, m)
        grids.append((g, g.sum(axis=1, dtype=np.int64)))
    (gl, sl), (gr, sr) = grids
    for s in range(min(total, left * k_max) + 1):
        a, b = gl[sl == s], gr[sr == total - s]
        if a.size == 0 or b.size == 0:
            continue
        step = max(1, chunk // len(b))
        for i in range(0, len(a), step):
            blk = a[i:i + step]
            yield np.concatenate([np.repeat(blk, len(b), axis=0),
                                  np.tile(b, (len(blk), 1))], axis=1)


def brute_force_optimum(spec: ProblemSpec, levels=(0.0, 0.25, 0.5, 0.75, 1.0),
                        max_designs: int = 50_000_000, chunk: int = 4096) -> BruteForceResult:
    """Lowest compliance over every design with densities in ``levels`` and exact volume.

    ``levels`` must be evenly spaced from 0 to 1 and the target volume must be
    a multiple of the spacing. Compliance is computed by batched dense solves,
    independently of the banded solver used elsewhere.
    """
    lv = np.asarray(levels, dtype=float)
    k_max = lv.size - 1
    if k_max < 1 or lv[0] != 0.0 or lv[-1] != 1.0 or not np.allclose(np.diff(lv), 1.0 / k_max):
        raise ValueError("levels must be evenly spaced over [0, 1]")
    total_f = spec.target_volume * k_max
    total = int(round(total_f))
    if abs(total - total_f) > 1e-9:
        raise ValueError("target volume is not representable on the level grid")
    n = spec.n_elements
    count = count_level_designs(n, k_max + 1, total)
    if count > max_designs:
        raise EnumerationBudgetError(
            f"{count} designs on the volume shell exceed the budget of {max_designs}")

    model = fe_model(spec)
    free = model.free
    m = free.size
    reduced = np.full(spec.n_dofs, -1)
    reduced[free] = np.arange(m)
    kel = np.zeros((n, m, m))
    for e in range(n):
        r = reduced[model.edof[e]]
        keep = r >= 0
        kel[e][np.ix_(r[keep], r[keep])] = model.ke[np.ix_(keep, keep)]
    kel = kel.reshape(n, m * m)
    if spec.filter_radius <= 1.0:
        w = np.eye(n)
    else:
        w = model.H.toarray() / model.Hs[:, None]
    f = model.f_free

    best_c, best_x = np.inf, None
    for block in _level_vectors(n, k_max, total, chunk):
        x = block / k_max
        xphys = x @ w.T
        e_mod = spec.youngs_modulus_min + xphys ** spec.penalization * (
            spec.youngs_modulus_solid - spec.youngs_modulus_min)
        k = (e_mod @ kel).reshape(-1, m, m)
        u = np.linalg.solve(k, np.broadcast_to(f, (len(k), m))[..., None])[..., 0]
        c = u @ f
        i = int(np.argmin(c))
        if c[i] < best_c:
            best_c, best_x = float(c[i]), x[i].copy()
    return BruteForceResult(best_x, best_c, count, tuple(float(v) for v in lv))
