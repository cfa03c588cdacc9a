import numpy as np
import pytest

from morphofilter.ensemble import EnsembleStats, MissingReferenceError, SweepSeries
from morphofilter.optimizer import (
    EnumerationBudgetError, OptimizationResult, brute_force_optimum, compare_to_reference,
    count_level_designs, oc_update, optimize,
)
from morphofilter.problem import ProblemSpec, compliance


def test_oc_update_keeps_volume_box_and_move_limit():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.2, 0.8, 30)
    x *= 15 / x.sum()
    dc = -rng.uniform(0.1, 5, 30)
    y = oc_update(x, dc, 15.0)
    assert y.sum() == pytest.approx(15.0, abs=1e-10)
    assert np.all(np.abs(y - x) <= 0.2 + 1e-12)
    assert y.min() >= 0 and y.max() <= 1


def test_oc_update_without_sensitivity_is_identity():
    x = np.full(4, 0.5)
    np.testing.assert_array_equal(oc_update(x, np.zeros(4), 2.0), x)


def test_optimize_converges_and_respects_volume():
    spec = ProblemSpec.cantilever(12, 6)
    res = optimize(spec)
    assert res.converged
    assert res.x_star.sum() == pytest.approx(spec.target_volume, abs=1e-9)
    assert res.c_min == pytest.approx(compliance(spec, res.x_star))
    # better than the uniform starting design
    assert res.c_min < compliance(spec, np.full(spec.n_elements, 0.5))


def test_zero_load_gives_zero_reference():
    res = optimize(ProblemSpec.cantilever(4, 2, load=0.0))
    assert res.c_min == 0.0


def test_level_count_matches_enumeration():
    assert count_level_designs(3, 3, 3) == 7      # permutations of (0,1,2) plus (1,1,1)
    assert count_level_designs(2, 5, 4) == 5
    assert count_level_designs(2, 2, 5) == 0
    assert count_level_designs(18, 5, 36) == 251_345_549_849


def test_brute_force_oracle_is_consistent_with_fem():
    spec = ProblemSpec.cantilever(4, 2)
    bf = brute_force_optimum(spec)
    assert bf.n_designs == 38_165
    assert bf.x_best.sum() == pytest.approx(spec.target_volume)
    assert set(np.round(bf.x_best * 4).astype(int)) <= {0, 1, 2, 3, 4}
    assert bf.c_best == pytest.approx(compliance(spec, bf.x_best), rel=1e-10)


@pytest.mark.parametrize("nelx,nely", [(4, 2), (5, 2)])
def test_oc_within_two_percent_of_exhaustive_levels(nelx, nely):
    spec = ProblemSpec.cantilever(nelx, nely)
    bf = brute_force_optimum(spec)
    oc = optimize(spec)
    assert abs(oc.c_min - bf.c_best) <= 0.02 * bf.c_best


def test_brute_force_budget_and_grid_checks():
    with pytest.raises(EnumerationBudgetError):
        brute_force_optimum(ProblemSpec.cantilever(6, 3))
    with pytest.raises(ValueError):
        brute_force_optimum(ProblemSpec.cantilever(4, 2), levels=(0.0, 0.3, 1.0))
    with pytest.raises(ValueError):
        brute_force_optimum(ProblemSpec.cantilever(3, 1, volume_fraction=0.3))


def _stats(t, c, x):
    n = x.size
    return EnsembleStats(t, 10, x, x, np.ones((n, 4), dtype=np.int64), c, c * c, 0.0,
                         0.0, 0.0, np.zeros(n))


def test_compare_to_reference_ratios_and_deviation():
    spec = ProblemSpec.cantilever(2, 1)
    ref = OptimizationResult(np.array([1.0, 0.0]), 4.0, 1, True)
    series = SweepSeries(spec, [_stats(2.0, 12.0, np.array([0.5, 0.5])),
                                _stats(1.0, 10.0, np.array([0.9, 0.1]))])
    rep = compare_to_reference(series, ref)
    np.testing.assert_allclose(rep.ratios, [3.0, 2.5])
    assert rep.final_ratio == 2.5
    assert rep.max_abs_deviation == pytest.approx(0.1)
    assert rep.to_dict()["temperatures"] == [2.0, 1.0]
    with pytest.raises(MissingReferenceError):
        compare_to_reference(series, OptimizationResult(ref.x_star, 0.0, 1, True))
