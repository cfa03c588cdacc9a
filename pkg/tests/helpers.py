"""Independent oracles shared by the unit and acceptance tests."""

import math

from scipy import integrate


def quadrature_mean(model, t):
    """Direct numerical integration of the density of states."""
    beta = 1.0 / t
    pts = [model.c_min, model.c_star] if math.isfinite(model.c_star) else [model.c_min]
    hi = max(pts[-1], model.c_min) + 200 * t * max(model.a, model.b, 1.0)

    def moment(k):
        f = lambda c: c ** k * model.density_of_states(c) * math.exp(-beta * (c - model.c_min))
        total, edges = 0.0, [*pts, hi]
        for lo, up in zip(edges, edges[1:]):
            total += integrate.quad(f, lo, up, limit=400, epsabs=0, epsrel=1e-12)[0]
        return total

    z = moment(0)
    return moment(1) / z, math.log(z) - beta * model.c_min


def crossover_temperature(model):
    """Temperature beyond which the upper power law outweighs the plateau by 1e4."""
    d = model.c_star - model.c_min
    log_ratio = (math.log(model.gamma_lo) + (model.a - 1) * math.log(d)
                 - math.log(model.gamma_hi) - math.lgamma(model.b) + math.log(1e4))
    return max(1e5 * d * model.b, math.exp(log_ratio / (model.b - 1)))
