"""Command-line entry point.

Subcommands ``optimize``, ``reference-entropy``, ``sweep``, ``analyze`` and
``render`` each read the resolved configuration and the artifacts of earlier
stages from the run directory, so every stage can be rerun on its own.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 missing upstream
artifact.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import analysis, render
from .config import ConfigError, RunConfig, resolve_schedule
from .ensemble import auto_temperature_high, run_sweep
from .optimizer import compare_to_reference, optimize
from .persistence import MissingArtifactError, RunDirectory, read_json, write_csv, write_json

log = logging.getLogger("morphofilter")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_MISSING = 0, 2, 3, 4
RENDER_TARGETS = ("design", "mean_density", "entropy", "condensation", "importance")


# -- stages -----------------------------------------------------------------------

def _save_config(run: RunDirectory, cfg: RunConfig):
    # the copy lives in the run directory, so its location is implied
    d = cfg.to_dict()
    d.pop("output_dir")
    write_json(run.path("config.json"), d)


def _load_config(args) -> RunConfig:
    """Config from ``--config``, else the run directory's saved copy; flags override."""
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        out = args.output
        if out and os.path.exists(os.path.join(out, "config.json")):
            cfg = RunConfig.load(os.path.join(out, "config.json"))
        else:
            raise ConfigError("no --config given and no config.json in the output directory",
                              "config")
    changes = {}
    if args.output:
        changes["output_dir"] = args.output
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")
        changes["seed"] = args.seed
    jobs = getattr(args, "jobs", None)
    if jobs is None and os.environ.get("MORPHOFILTER_JOBS"):
        try:
            jobs = int(os.environ["MORPHOFILTER_JOBS"])
        except ValueError as exc:
            raise ConfigError("MORPHOFILTER_JOBS must be an integer", "jobs") from exc
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("must be >= 1", "jobs")
        changes["jobs"] = jobs
    return replace(cfg, **changes)


def cmd_optimize(cfg: RunConfig) -> int:
    run = RunDirectory(cfg.output_dir)
    t0 = time.perf_counter()
    o = cfg.optimizer
    res = optimize(cfg.problem, max_iters=o.max_iters, move_limit=o.move_limit, tol=o.tol)
    _save_config(run, cfg)
    run.write_optimization(cfg.problem, res)
    render.write_raster(run.path("optimize", "x_star"),
                        render.grayscale(res.x_star, cfg.problem.nelx, cfg.problem.nely))
    run.update_manifest(cfg.digest(), "optimize", time.perf_counter() - t0,
                        {"c_min": res.c_min, "converged": res.converged})
    print(f"C_min = {res.c_min:.6g} after {res.iterations} iterations"
          f" ({'converged' if res.converged else 'NOT converged'})")
    if not res.converged:
        print("error: optimizer did not converge; best iterate written", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_reference(cfg: RunConfig) -> int:
    run = RunDirectory(cfg.output_dir)
    t0 = time.perf_counter()
    params = cfg.thermostat.at_temperature(1.0)
    s_max, stats = analysis.max_entropy_reference(cfg.problem, params, cfg.reference, cfg.seed)
    _save_config(run, cfg)
    run.write_reference(stats, s_max, {"seed": cfg.seed, "temperature": 1.0,
                                       "sampling": cfg.reference.to_dict()})
    run.update_manifest(cfg.digest(), "reference-entropy", time.perf_counter() - t0,
                        {"seed": cfg.seed})
    spread = (s_max.max() - s_max.min()) / s_max.mean()
    print(f"S_max mean {s_max.mean():.4f} nats (ln B = {np.log(stats.bins):.4f}),"
          f" cross-site spread {100 * spread:.2f}%")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    run = RunDirectory(cfg.output_dir)
    ref = run.read_optimization(cfg.problem)
    t0 = time.perf_counter()
    t_hi = None
    if isinstance(cfg.schedule, dict) and cfg.schedule["t_hi"] == "auto":
        t_hi = auto_temperature_high(cfg.problem, ref.c_min, cfg.thermostat,
                                     target_ratio=float(cfg.schedule["target_ratio"]),
                                     seed=cfg.seed)
        log.info("auto T_hi = %.6g", t_hi)
    schedule = resolve_schedule(cfg.schedule, t_hi)

    def progress(i, stats):
        log.info("T[%d]=%.5g  <C>/C_min=%.4f  <lambda>=%.4g", i, stats.temperature,
                 stats.mean_compliance / ref.c_min, stats.mean_pressure)

    series = run_sweep(cfg.problem, schedule, cfg.sampling, cfg.thermostat, anneal=cfg.anneal,
                       seed=cfg.seed, c_min=ref.c_min, jobs=cfg.jobs, progress=progress)
    _save_config(run, cfg)
    run.write_sweep(series, {"c_min": ref.c_min, "t_hi": schedule[0]})
    run.update_manifest(cfg.digest(), "sweep", time.perf_counter() - t0,
                        {"seeds": series.provenance["seeds"], "schedule": schedule})
    for f in series.failures:
        print(f"error: T={f['T']:.5g} failed: {f['error']}", file=sys.stderr)
    if len(series):
        print(f"{len(series)} temperatures, <C>/C_min from "
              f"{series.mean_compliance[0] / ref.c_min:.3f} to "
              f"{series.mean_compliance[-1] / ref.c_min:.3f}")
    return EXIT_RUNTIME if series.failures else EXIT_OK


@dataclass
class AnalysisResult:
    entropy: analysis.EntropyMap
    condensation: analysis.CondensationMap
    regimes: analysis.RegimeFit
    labels: np.ndarray
    importance: analysis.ImportanceMap | None = None


def analyze_series(series, s_max, reference=None) -> AnalysisResult:
    """All derived quantities of a sweep; pure function of persisted data."""
    emap = analysis.entropy_map(series, s_max)
    cond = analysis.condensation_map(emap)
    fit = analysis.regime_fit(series.temperatures, series.mean_compliance)
    s = emap.normalized
    labels = np.array([analysis.classify_sites(e.mean_density, s[k])
                       for k, e in enumerate(series)])
    imp = None
    if reference is not None:
        spec = series.spec
        imp = analysis.importance_map(reference.x_star, cond, spec.nelx, spec.nely)
    return AnalysisResult(emap, cond, fit, labels, imp)


def cmd_analyze(cfg: RunConfig) -> int:
    run = RunDirectory(cfg.output_dir)
    series = run.read_sweep()
    s_max, _ = run.read_reference()
    try:
        ref = run.read_optimization(series.spec)
    except MissingArtifactError:
        ref = None
    t0 = time.perf_counter()
    res = analyze_series(series, s_max, ref)
    temps, s = res.entropy.temperatures, res.entropy.normalized
    n = s_max.size
    write_csv(run.path("analysis", "entropy.csv"), ["site", "T", "S", "S_max", "s"],
              ((i, temps[k], res.entropy.entropy[k, i], s_max[i], s[k, i])
               for i in range(n) for k in range(temps.size)))
    cond = res.condensation
    write_csv(run.path("analysis", "condensation.csv"), ["site", "T_c", "T_c_normalized", "flag"],
              zip(range(n), cond.t_c, cond.normalized, cond.flags))
    write_json(run.path("analysis", "regime.json"), res.regimes.to_dict())
    write_csv(run.path("analysis", "classification.csv"), ["site", "T", "label", "mean_density", "s"],
              ((i, temps[k], res.labels[k, i], series.entries[k].mean_density[i], s[k, i])
               for i in range(n) for k in range(temps.size)))
    summary = {"t_c_max": cond.t_c_max, "n_segments": len(res.regimes.segments),
               "slopes": res.regimes.slopes,
               "in_play_counts": (res.labels == analysis.IN_PLAY).sum(axis=1),
               "temperatures": temps}
    if ref is not None:
        write_csv(run.path("analysis", "importance.csv"), ["site", "density", "T_c_normalized"],
                  res.importance.table())
        summary["anneal"] = compare_to_reference(series, ref).to_dict()
    write_json(run.path("analysis", "summary.json"), summary)
    run.update_manifest(read_json(run.path("manifest.json")).get("config_hash", cfg.digest())
                        if run.path("manifest.json").exists() else cfg.digest(),
                        "analyze", time.perf_counter() - t0)
    print(f"{len(res.regimes.segments)} regimes, slopes "
          + ", ".join(f"{v:.3g}" for v in res.regimes.slopes) + f"; T_c max {cond.t_c_max:.4g}")
    return EXIT_OK


def _pick_temperature(series, selector: str | None) -> int:
    temps = series.temperatures
    if selector in (None, "", "max"):
        return 0
    if selector == "min":
        return temps.size - 1
    try:
        t = float(selector)
    except ValueError as exc:
        raise ConfigError(f"temperature selector '{selector}' is not a number, max or min",
                          "target") from exc
    return int(np.argmin(np.abs(temps - t)))


def cmd_render(cfg: RunConfig, target: str, scale: int = 8) -> int:
    run = RunDirectory(cfg.output_dir)
    name, _, selector = target.partition("@")
    if name not in RENDER_TARGETS:
        raise ConfigError(f"unknown target '{name}', expected one of {RENDER_TARGETS}", "target")
    spec = cfg.problem
    if name == "design":
        rgb = render.grayscale(run.read_optimization(spec).x_star, spec.nelx, spec.nely)
        stem = "design"
    elif name == "importance":
        ref = run.read_optimization(spec)
        series = run.read_sweep()
        s_max, _ = run.read_reference()
        cond = analysis.condensation_map(analysis.entropy_map(series, s_max))
        rgb = analysis.importance_map(ref.x_star, cond, spec.nelx, spec.nely).rgb
        stem = "importance"
    elif name == "condensation":
        series = run.read_sweep()
        s_max, _ = run.read_reference()
        cond = analysis.condensation_map(analysis.entropy_map(series, s_max))
        # displayed as if every site were filled, so hue alone carries T_c
        rgb = analysis.importance_map(np.ones(spec.n_elements), cond, spec.nelx, spec.nely).rgb
        stem = "condensation"
    else:
        series = run.read_sweep()
        k = _pick_temperature(series, selector)
        if name == "mean_density":
            rgb = render.grayscale(series.entries[k].mean_density, spec.nelx, spec.nely)
        else:
            s_max, _ = run.read_reference()
            s = analysis.site_entropy(series.entries[k].density_histograms) / s_max
            rgb = render.colormap(s, spec.nelx, spec.nely)
        stem = f"{name}_T{k:03d}"
    t0 = time.perf_counter()
    paths = render.write_raster(run.path("render", stem), rgb, scale)
    if run.path("manifest.json").exists():
        run.update_manifest(read_json(run.path("manifest.json"))["config_hash"],
                            f"render:{stem}", time.perf_counter() - t0)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphofilter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, jobs=False):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--output", help="run directory (overrides output_dir)")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed (overrides seed)")
        if jobs:
            sp.add_argument("--jobs", type=int,
                            help="worker processes for non-annealed sweeps "
                                 "(default: MORPHOFILTER_JOBS or config)")
        return sp

    common(sub.add_parser("optimize", help="OC reference optimum and C_min"), seed=False)
    common(sub.add_parser("reference-entropy", help="zero-force entropy reference S_max"))
    common(sub.add_parser("sweep", help="temperature sweep"), jobs=True)
    common(sub.add_parser("analyze", help="entropy, condensation and regime analysis"),
           seed=False)
    r = common(sub.add_parser("render", help="write a raster"), seed=False)
    r.add_argument("--target", required=True,
                   help="design | importance | condensation | mean_density[@T] | entropy[@T]; "
                        "T is a temperature, 'max' (default) or 'min'")
    r.add_argument("--scale", type=int, default=8, help="pixels per element")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "optimize":
            return cmd_optimize(cfg)
        if args.command == "reference-entropy":
            return cmd_reference(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "analyze":
            return cmd_analyze(cfg)
        return cmd_render(cfg, args.target, args.scale)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - surfaced as runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
