"""Post-processing of temperature sweeps.

Site entropies and their normalization by the flat-landscape reference,
condensation temperatures, importance rasters, site classification,
piecewise-linear regime fits of ``<C>(T)``, and the closed-form mean
compliance of the two-regime density-of-states model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .ensemble import SamplingParams, SweepSeries, sample_at_temperature
from .dynamics import ThermostatParams
from .problem import ProblemSpec

GAS_THRESHOLD = 0.85
CONDENSED_THRESHOLD = 0.15

UNCONSTRAINED, IN_PLAY, CONDENSED = "unconstrained", "in-play", "condensed"


# -- entropy --------------------------------------------------------------------

def site_entropy(histogram, miller_madow: bool = False) -> float | np.ndarray:
    """Plug-in entropy (nats) of binned samples.

    ``histogram`` may be one site's bin counts or a ``(sites, bins)`` array.
    ``miller_madow`` adds the ``(K - 1) / (2n)`` bias correction, ``K`` being
    the number of occupied bins.
    """
    h = np.asarray(histogram, dtype=float)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    n = h.sum(axis=1)
    if np.any(n <= 0):
        raise ValueError("cannot take the entropy of an empty histogram")
    q = h / n[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(q), 0.0)
    s = -terms.sum(axis=1)
    if miller_madow:
        s = s + ((h > 0).sum(axis=1) - 1) / (2 * n)
    s = np.maximum(s, 0.0)
    return float(s[0]) if single else s


def bootstrap_entropy_stderr(histogram, n_boot: int = 200, seed: int = 0) -> np.ndarray:
    """Multinomial-bootstrap standard error of :func:`site_entropy` per site."""
    h = np.atleast_2d(np.asarray(histogram, dtype=np.int64))
    rng = np.random.default_rng(seed)
    n = h.sum(axis=1)
    out = np.empty(h.shape[0])
    for i, row in enumerate(h):
        draws = rng.multinomial(n[i], row / n[i], size=n_boot)
        out[i] = site_entropy(draws).std(ddof=1)
    return out


def max_entropy_reference(spec: ProblemSpec, params: ThermostatParams | None = None,
                          sampling: SamplingParams | None = None, seed: int = 0):
    """Per-site entropy of the flat landscape (compliance force switched off).

    Returns ``(S_max, stats)``; constraint and box bounds stay active.
    """
    params = params or ThermostatParams(1.0)
    sampling = sampling or SamplingParams()
    stats, _ = sample_at_temperature(
        spec, params, sampling.n_equil, sampling.n_samples, sampling.stride, seed,
        bins=sampling.bins, observable=sampling.observable, zero_force=True)
    return site_entropy(stats.density_histograms), stats


@dataclass
class EntropyMap:
    """Per-site entropies over a sweep; rows follow the sweep's temperatures."""

    temperatures: np.ndarray
    entropy: np.ndarray
    s_max: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        return self.entropy / self.s_max[None, :]


def entropy_map(series: SweepSeries, s_max, miller_madow: bool = False) -> EntropyMap:
    s_max = np.asarray(s_max, dtype=float)
    ent = np.array([site_entropy(e.density_histograms, miller_madow) for e in series])
    if ent.shape[1] != s_max.size:
        raise ValueError("reference entropy and sweep have different site counts")
    return EntropyMap(series.temperatures, ent, s_max)


# -- condensation ---------------------------------------------------------------

FLAG_NONE, FLAG_NEVER, FLAG_ABOVE = "", "never", "above_range"


def condensation_temperature(temperatures, normalized_entropy,
                             threshold: float = GAS_THRESHOLD) -> tuple[float, str]:
    """Highest temperature at which ``S/S_max`` first falls below ``threshold``.

    Scans from the hot end and interpolates linearly between the bracketing
    sweep temperatures. A site already below threshold at the hottest point
    gets that temperature (flag ``"above_range"``); one that never crosses
    gets the coldest temperature (flag ``"never"``).
    """
    t = np.asarray(temperatures, dtype=float)
    s = np.asarray(normalized_entropy, dtype=float)
    if t.size < 2 or t.size != s.size:
        raise ValueError("need at least two temperatures with matching entropies")
    if np.any(np.diff(t) >= 0):
        raise ValueError("temperatures must be strictly decreasing")
    if s[0] < threshold:
        return float(t[0]), FLAG_ABOVE
    for k in range(1, t.size):
        if s[k] < threshold:
            frac = (s[k - 1] - threshold) / (s[k - 1] - s[k])
            return float(t[k - 1] + frac * (t[k] - t[k - 1])), FLAG_NONE
    return float(t[-1]), FLAG_NEVER


@dataclass
class CondensationMap:
    t_c: np.ndarray
    flags: list[str]

    @property
    def t_c_max(self) -> float:
        finite = self.t_c[np.isfinite(self.t_c)]
        return float(finite.max()) if finite.size else math.nan

    @property
    def normalized(self) -> np.ndarray:
        return self.t_c / self.t_c_max


def condensation_map(emap: EntropyMap, threshold: float = GAS_THRESHOLD) -> CondensationMap:
    s = emap.normalized
    res = [condensation_temperature(emap.temperatures, s[:, i], threshold)
           for i in range(s.shape[1])]
    return CondensationMap(np.array([r[0] for r in res]), [r[1] for r in res])


# -- importance map ---------------------------------------------------------------

def temperature_color(level) -> np.ndarray:
    """Blue (0, designable) through cyan/green/yellow to red (1, essential)."""
    level = np.clip(np.asarray(level, dtype=float), 0.0, 1.0)
    hue = (1.0 - level) * 240.0 / 60.0
    c = np.ones_like(level)
    xval = c * (1 - np.abs(np.mod(hue, 2) - 1))
    sector = np.minimum(np.floor(hue).astype(int), 3)
    r = np.select([sector == 0, sector == 1], [c, xval], 0.0)
    g = np.select([sector == 0, sector == 1, sector == 2, sector == 3], [xval, c, c, xval], 0.0)
    b = np.select([sector == 2, sector == 3], [xval, c], 0.0)
    return np.stack([r, g, b], axis=-1)


@dataclass
class ImportanceMap:
    """Per-site (optimal density, normalized T_c) with the composited raster.

    ``rgb`` is ``(nely, nelx, 3)`` uint8: hue from the normalized
    condensation temperature, alpha from the optimal density, over a white
    background.
    """

    density: np.ndarray
    t_c_normalized: np.ndarray
    rgb: np.ndarray

    def table(self) -> list[tuple[int, float, float]]:
        return [(i, float(d), float(t)) for i, (d, t)
                in enumerate(zip(self.density, self.t_c_normalized))]


def importance_map(optimal_x, cond: CondensationMap, nelx: int, nely: int,
                   background=(255, 255, 255)) -> ImportanceMap:
    x = np.asarray(optimal_x, dtype=float)
    if x.size != nelx * nely or cond.t_c.size != x.size:
        raise ValueError(f"mesh mismatch: design has {x.size} sites, map has {cond.t_c.size}, "
                         f"grid is {nelx}x{nely}")
    level = np.nan_to_num(cond.normalized, nan=0.0)
    alpha = np.clip(x, 0.0, 1.0)[:, None]
    color = temperature_color(level) * 255.0
    bg = np.asarray(background, dtype=float)[None, :]
    pix = np.rint(alpha * color + (1 - alpha) * bg).astype(np.uint8)
    rgb = pix.reshape(nelx, nely, 3).transpose(1, 0, 2)
    return ImportanceMap(x.copy(), level, np.ascontiguousarray(rgb))


# -- site classification ---------------------------------------------------------

def classify_sites(mean_density, normalized_entropy, s_lo: float = CONDENSED_THRESHOLD,
                   s_hi: float = GAS_THRESHOLD, band: float = 0.1) -> np.ndarray:
    """Label each site ``condensed``, ``unconstrained`` or ``in-play`` at one temperature."""
    x = np.asarray(mean_density, dtype=float)
    s = np.asarray(normalized_entropy, dtype=float)
    labels = np.full(x.shape, IN_PLAY, dtype=object)
    labels[(s > s_hi) & (np.abs(x - 0.5) < band)] = UNCONSTRAINED
    labels[s < s_lo] = CONDENSED
    return labels


# -- regime fit -------------------------------------------------------------------

@dataclass
class Segment:
    t_start: float
    t_end: float
    slope: float
    intercept: float
    residual: float
    indices: tuple[int, int]

    @property
    def in_play_over_nu(self) -> float:
        return self.slope


@dataclass
class RegimeFit:
    """Segments ordered from low to high temperature."""

    segments: list[Segment] = field(default_factory=list)
    criterion: float = math.nan

    @property
    def slopes(self) -> np.ndarray:
        return np.array([s.slope for s in self.segments])

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "segments": [
            {"t_start": s.t_start, "t_end": s.t_end, "slope": s.slope,
             "intercept": s.intercept, "residual": s.residual, "n_ip_over_nu": s.slope,
             "first_index": s.indices[0], "last_index": s.indices[1]}
            for s in self.segments]}


def _line_fit(t, y, w):
    """Weighted least squares line with slope constrained to be >= 0."""
    sw = w.sum()
    tm, ym = (w * t).sum() / sw, (w * y).sum() / sw
    stt = (w * (t - tm) ** 2).sum()
    slope = (w * (t - tm) * (y - ym)).sum() / stt if stt > 0 else 0.0
    if slope < 0:
        slope = 0.0
    intercept = ym - slope * tm
    rss = float((w * (y - intercept - slope * t) ** 2).sum())
    return slope, intercept, rss


def regime_fit(temperatures, mean_compliance, max_segments: int = 6, min_points: int = 3,
               sigma=None, penalty: float | None = None) -> RegimeFit:
    """Piecewise-linear fit of ``<C>`` against ``T`` with exhaustive change points.

    The number of segments minimizes a BIC-style description length:
    ``chi2 + penalty * k`` when per-point ``sigma`` is known, otherwise
    ``n * log(RSS / n) + penalty * k``; ``penalty`` defaults to ``3 log n``
    (slope, intercept and break per segment). Slopes are constrained
    non-negative.
    """
    t = np.asarray(temperatures, dtype=float)
    y = np.asarray(mean_compliance, dtype=float)
    order = np.argsort(t)
    t, y = t[order], y[order]
    n = t.size
    if n < max(4, min_points):
        raise ValueError("regime fit needs at least 4 points")
    if sigma is not None:
        sig = np.asarray(sigma, dtype=float)[order]
        sig = np.where(sig > 0, sig, np.min(sig[sig > 0]) if np.any(sig > 0) else 1.0)
        w = 1.0 / sig ** 2
    else:
        w = np.ones(n)
    penalty = 3.0 * math.log(n) if penalty is None else penalty
    max_segments = max(1, min(max_segments, n // min_points))

    cost = np.full((n, n), np.inf)
    fits = {}
    for i in range(n):
        for j in range(i + min_points - 1, n):
            fits[i, j] = _line_fit(t[i:j + 1], y[i:j + 1], w[i:j + 1])
            cost[i, j] = fits[i, j][2]

    # best[k][j]: minimal RSS covering points 0..j with k+1 segments
    best = np.full((max_segments, n), np.inf)
    back = np.full((max_segments, n), -1, dtype=int)
    best[0] = cost[0]
    for k in range(1, max_segments):
        for j in range(n):
            for i in range(1, j + 1):
                c = best[k - 1, i - 1] + cost[i, j]
                if c < best[k, j]:
                    best[k, j], back[k, j] = c, i

    scale = float(np.sum(w * (y - np.average(y, weights=w)) ** 2)) or 1.0
    floor = 1e-12 * scale
    crit = []
    for k in range(max_segments):
        rss = best[k, n - 1]
        if not np.isfinite(rss):
            crit.append(np.inf)
            continue
        if sigma is not None:
            crit.append(rss + penalty * (k + 1))
        else:
            crit.append(n * math.log(rss / n + floor) + penalty * (k + 1))
    k = int(np.argmin(crit))

    bounds, j = [], n - 1
    for kk in range(k, -1, -1):
        i = back[kk, j] if kk > 0 else 0
        bounds.append((i, j))
        j = i - 1
    bounds.reverse()
    segments = []
    for idx, (i, j) in enumerate(bounds):
        slope, intercept, rss = fits[i, j]
        lo = t[0] if idx == 0 else 0.5 * (t[i - 1] + t[i])
        hi = t[-1] if idx == len(bounds) - 1 else 0.5 * (t[j] + t[j + 1])
        segments.append(Segment(float(lo), float(hi), float(slope), float(intercept),
                                float(rss), (int(order[i]), int(order[j]))))
    return RegimeFit(segments, float(crit[k]))


# -- two-regime theory --------------------------------------------------------------

@dataclass(frozen=True)
class TheoryModel:
    """Piecewise power-law density of states.

    ``Omega(C) = g_lo (C - C_min)**(N_lo/nu - 1)`` below ``C_star`` and
    ``g_lo (C_star - C_min)**(N_lo/nu - 1) + g_hi (C - C_star)**(N_hi/nu - 1)``
    above it. ``c_star = inf`` gives the single-regime model.
    """

    c_min: float
    c_star: float
    n_lo: float
    n_hi: float
    nu: float = 1.0
    gamma_lo: float = 1.0
    gamma_hi: float = 1.0

    def __post_init__(self):
        if not self.c_star > self.c_min:
            raise ValueError("c_star must exceed c_min")
        for name in ("n_lo", "n_hi", "nu", "gamma_lo", "gamma_hi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def single(cls, c_min: float, n_ip: float, nu: float = 1.0, gamma: float = 1.0):
        return cls(c_min, math.inf, n_ip, n_ip, nu, gamma, gamma)

    @property
    def a(self) -> float:
        return self.n_lo / self.nu

    @property
    def b(self) -> float:
        return self.n_hi / self.nu

    def density_of_states(self, c):
        c = np.asarray(c, dtype=float)
        a, b, d = self.a, self.b, self.c_star - self.c_min
        with np.errstate(invalid="ignore", divide="ignore"):
            low = self.gamma_lo * np.power(np.maximum(c - self.c_min, 0.0), a - 1)
            high = (self.gamma_lo * d ** (a - 1)
                    + self.gamma_hi * np.power(np.maximum(c - self.c_star, 0.0), b - 1))
        out = np.where(c < self.c_star, low, high)
        return np.where(c <= self.c_min, 0.0, out)


def _log_lower_gamma_reg(a: float, x: float) -> float:
    """log P(a, x) without underflow for small ``x``."""
    if x <= 0:
        return -math.inf
    if x < a + 1.0:
        # P(a, x) = x^a e^-x / Gamma(a+1) * sum_k x^k / ((a+1)...(a+k))
        term, total, k = 1.0, 1.0, 0
        while term > 1e-17 * total and k < 10_000:
            k += 1
            term *= x / (a + k)
            total += term
        return a * math.log(x) - x - special.gammaln(a + 1) + math.log(total)
    return math.log(special.gammainc(a, x))


def _theory_terms(model: TheoryModel, temperature: float):
    """Log-weights and conditional means of the three pieces of ``Z``.

    Pieces: the power law below ``C_star``, the constant plateau above it and
    the second power law above it. Weights are relative to ``exp(-beta C_min)``.
    """
    t = float(temperature)
    beta = 1.0 / t
    a, b = model.a, model.b
    d = model.c_star - model.c_min
    logs, means = [], []
    if math.isinf(d):
        logs.append(math.log(model.gamma_lo) + special.gammaln(a) + a * math.log(t))
        means.append(model.c_min + a * t)
        return np.array(logs), np.array(means)
    x = beta * d
    log_p = _log_lower_gamma_reg(a, x)
    logs.append(math.log(model.gamma_lo) + special.gammaln(a) + a * math.log(t) + log_p)
    # truncated gamma mean: T * (a - x^a e^-x / (Gamma(a) P(a, x)))
    log_q = a * math.log(x) - x - special.gammaln(a) - log_p
    means.append(model.c_min + t * (a - math.exp(log_q)))
    logs.append(math.log(model.gamma_lo) + (a - 1) * math.log(d) + math.log(t) - x)
    means.append(model.c_star + t)
    logs.append(math.log(model.gamma_hi) + special.gammaln(b) + b * math.log(t) - x)
    means.append(model.c_star + b * t)
    return np.array(logs), np.array(means)


def theory_log_partition(model: TheoryModel, temperature: float) -> float:
    """``ln Z(beta)`` of the piecewise model at ``beta = 1/T``."""
    logs, _ = _theory_terms(model, temperature)
    return float(special.logsumexp(logs) - model.c_min / temperature)


def theory_mean_compliance(model: TheoryModel, temperature: float) -> float:
    """``<C> = -d ln Z / d beta`` evaluated analytically, piece by piece."""
    logs, means = _theory_terms(model, temperature)
    if logs.size == 1:
        return float(means[0])
    w = np.exp(logs - logs.max())
    return float(np.dot(w, means) / w.sum())


def theory_slope(model: TheoryModel, temperature: float, rel_step: float = 1e-4) -> float:
    """``d<C>/dT`` by a fourth-order central difference in ``log T``."""
    h = rel_step
    f = [theory_mean_compliance(model, temperature * math.exp(k * h)) for k in (-2, -1, 1, 2)]
    dlog = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
    return dlog / temperature
