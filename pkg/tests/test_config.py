import json

import numpy as np
import pytest

from morphofilter.config import ConfigError, RunConfig, resolve_schedule
from morphofilter.ensemble import SamplingParams, SweepSeries
from morphofilter.persistence import MissingArtifactError, RunDirectory, read_csv, write_csv
from morphofilter.problem import ProblemSpec
from morphofilter.optimizer import optimize
from morphofilter.ensemble import run_sweep


def _base():
    return {"problem": ProblemSpec.cantilever(6, 3).to_dict(),
            "schedule": [2.0, 1.0], "seed": 3}


def test_round_trip_and_digest():
    cfg = RunConfig.from_dict(_base())
    back = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.digest() == cfg.digest()
    moved = RunConfig.from_dict({**_base(), "output_dir": "elsewhere", "jobs": 4})
    assert moved.digest() == cfg.digest()
    assert RunConfig.from_dict({**_base(), "seed": 4}).digest() != cfg.digest()


@pytest.mark.parametrize("patch,field", [
    ({"problem": {"nelx": 4, "nely": 2, "vol_frac": 0.5, "supports": [0, 1, 2]}}, "problem.loads"),
    ({"schedule": [1.0, 2.0]}, "schedule"),
    ({"schedule": {"spacing": "cubic"}}, "schedule.spacing"),
    ({"schedule": {"count": 0}}, "schedule.count"),
    ({"seed": -1}, "seed"),
    ({"seed": 2 ** 64}, "seed"),
    ({"sampling": {"stride": 0}}, "sampling"),
    ({"sampling": {"strides": 5}}, "sampling"),
    ({"jobs": 0}, "jobs"),
])
def test_invalid_fields_are_named(patch, field):
    data = {**_base(), **patch}
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(data)
    assert err.value.field_name == field


def test_missing_problem_and_bad_files(tmp_path):
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict({"seed": 1})
    assert err.value.field_name == "problem"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.json")


def test_resolve_schedule_variants():
    assert resolve_schedule([3.0, 1.0]) == [3.0, 1.0]
    log = resolve_schedule({"t_hi": 8.0, "t_lo": 1.0, "count": 4, "spacing": "log"})
    np.testing.assert_allclose(log, [8, 4, 2, 1])
    lin = resolve_schedule({"t_hi": 4.0, "t_lo": 1.0, "count": 4, "spacing": "linear"})
    np.testing.assert_allclose(lin, [4, 3, 2, 1])
    auto = {"t_hi": "auto", "t_lo_factor": 0.25, "count": 3, "spacing": "log"}
    np.testing.assert_allclose(resolve_schedule(auto, 8.0), [8, 4, 2])
    with pytest.raises(ConfigError):
        resolve_schedule(auto)


def test_csv_floats_round_trip_exactly(tmp_path):
    vals = [0.1, 1 / 3, 2.0 ** -40, 123456.789]
    write_csv(tmp_path / "a.csv", ["v"], ([v] for v in vals))
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["v"]
    assert [float(r[0]) for r in rows] == vals


def test_run_directory_round_trips(tmp_path):
    spec = ProblemSpec.cantilever(4, 2)
    run = RunDirectory(tmp_path)
    with pytest.raises(MissingArtifactError, match="optimize"):
        run.read_optimization(spec)
    with pytest.raises(MissingArtifactError, match="reference-entropy"):
        run.read_reference()
    with pytest.raises(MissingArtifactError, match="sweep"):
        run.read_sweep()

    res = optimize(spec)
    run.write_optimization(spec, res)
    back = run.read_optimization(spec)
    np.testing.assert_array_equal(back.x_star, res.x_star)
    assert back.c_min == res.c_min

    sampling = SamplingParams(n_equil=100, n_samples=20, stride=2, bins=8)
    series = run_sweep(spec, [2.0, 1.0], sampling, seed=1, c_min=res.c_min)
    run.write_sweep(series, {"c_min": res.c_min})
    loaded = run.read_sweep()
    assert isinstance(loaded, SweepSeries)
    np.testing.assert_array_equal(loaded.temperatures, series.temperatures)
    for a, b in zip(loaded, series):
        np.testing.assert_array_equal(a.density_histograms, b.density_histograms)
        np.testing.assert_array_equal(a.mean_density, b.mean_density)
        assert a.mean_compliance == b.mean_compliance
        assert a.c_min_reference == b.c_min_reference

    m = run.update_manifest("abc", "sweep", 1.25, {"seeds": series.provenance["seeds"]})
    assert m["config_hash"] == "abc" and m["timings"]["sweep"] == 1.25
    listed = set(m["files"])
    on_disk = {p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*")
               if p.is_file() and p.name != "manifest.json"}
    assert listed == on_disk
