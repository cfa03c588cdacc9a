"""On-disk layout of a run directory.

::

    run/
      config.json                 resolved configuration
      manifest.json               config hash, version, timings, file checksums
      optimize/result.json        C_min, iteration history
      optimize/x_star.csv         optimal design as a nely x nelx grid
      reference/summary.json      flat-landscape ensemble summary
      reference/sites.csv         site, S_max, mean densities
      reference/histograms.csv    per-site bin counts
      sweep/sweep.json            provenance, temperatures, per-T summaries
      sweep/bins.csv              histogram bin edges
      sweep/T###_summary.json     one per temperature, ### is the schedule index
      sweep/T###_sites.csv
      sweep/T###_histograms.csv
      analysis/...                entropy, condensation, regimes, classification
      render/...                  PPM and PNG rasters

Floats are written with ``repr`` so values round-trip exactly and repeated
runs produce identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from . import __version__
from .ensemble import EnsembleStats, SweepSeries
from .optimizer import OptimizationResult
from .problem import ProblemSpec

MANIFEST = "manifest.json"


class MissingArtifactError(FileNotFoundError):
    """A required upstream artifact is absent; the message names the file and the fix."""


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunDirectory:
    """Paths and readers/writers for one run."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, *parts, hint: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifactError(f"missing {p}; {hint}")
        return p

    # -- manifest -------------------------------------------------------------

    def update_manifest(self, config_hash: str, stage: str, seconds: float,
                        extra: dict | None = None) -> dict:
        mpath = self.path(MANIFEST)
        manifest = read_json(mpath) if mpath.exists() else {}
        manifest.update({"tool": "morphofilter", "version": __version__,
                         "config_hash": config_hash})
        manifest.setdefault("timings", {})[stage] = round(float(seconds), 3)
        if extra:
            manifest.setdefault("stages", {})[stage] = _jsonable(extra)
        files = {}
        for p in sorted(self.root.rglob("*")):
            if p.is_file() and p != mpath:
                files[p.relative_to(self.root).as_posix()] = sha256(p)
        manifest["files"] = files
        write_json(mpath, manifest)
        return manifest

    # -- optimizer --------------------------------------------------------------

    def write_optimization(self, spec: ProblemSpec, res: OptimizationResult) -> list[Path]:
        grid = res.x_star.reshape(spec.nelx, spec.nely).T
        out = [write_csv(self.path("optimize", "x_star.csv"),
                         ["iy"] + [f"x{ix}" for ix in range(spec.nelx)],
                         [[iy, *row] for iy, row in enumerate(grid)])]
        out.append(write_json(self.path("optimize", "result.json"), {
            "c_min": res.c_min, "iterations": res.iterations, "converged": res.converged,
            "volume": float(res.x_star.sum()), "target_volume": spec.target_volume,
            "change_history": res.change_history,
            "compliance_history": res.compliance_history,
            "flagged_iterations": res.flagged_iterations}))
        return out

    def read_optimization(self, spec: ProblemSpec | None = None) -> OptimizationResult:
        hint = "run `morphofilter optimize` first"
        doc = read_json(self.require("optimize", "result.json", hint=hint))
        header, rows = read_csv(self.require("optimize", "x_star.csv", hint=hint))
        grid = np.array([[float(v) for v in r[1:]] for r in rows])
        if spec is not None and grid.shape != (spec.nely, spec.nelx):
            raise ValueError("optimize/x_star.csv does not match the problem mesh")
        return OptimizationResult(
            x_star=grid.T.reshape(-1), c_min=doc["c_min"], iterations=doc["iterations"],
            converged=doc["converged"], change_history=doc["change_history"],
            compliance_history=doc["compliance_history"],
            flagged_iterations=doc["flagged_iterations"])

    # -- ensembles ---------------------------------------------------------------

    def _write_stats(self, prefix: Path, stats: EnsembleStats) -> list[Path]:
        n = stats.mean_density.size
        sites = write_csv(prefix.with_name(prefix.name + "_sites.csv"),
                          ["site", "mean_density", "mean_physical_density", "mean_momentum_sq"],
                          zip(range(n), stats.mean_density, stats.mean_physical_density,
                              stats.mean_momentum_sq))
        hist = write_csv(prefix.with_name(prefix.name + "_histograms.csv"),
                         ["site"] + [f"b{b}" for b in range(stats.bins)],
                         ([i, *row] for i, row in enumerate(stats.density_histograms)))
        summ = write_json(prefix.with_name(prefix.name + "_summary.json"), stats.summary())
        return [summ, sites, hist]

    @staticmethod
    def _read_stats(prefix: Path) -> EnsembleStats:
        summ = read_json(prefix.with_name(prefix.name + "_summary.json"))
        _, sites = read_csv(prefix.with_name(prefix.name + "_sites.csv"))
        _, hist = read_csv(prefix.with_name(prefix.name + "_histograms.csv"))
        cols = np.array([[float(v) for v in r[1:]] for r in sites])
        return EnsembleStats(
            temperature=summ["T"], n_samples=summ["n_samples"],
            mean_density=cols[:, 0], mean_physical_density=cols[:, 1],
            density_histograms=np.array([[int(v) for v in r[1:]] for r in hist], dtype=np.int64),
            mean_compliance=summ["mean_compliance"],
            compliance_second_moment=summ["compliance_second_moment"],
            compliance_stderr=summ["compliance_stderr"], mean_pressure=summ["mean_pressure"],
            pressure_stderr=summ["pressure_stderr"], mean_momentum_sq=cols[:, 2],
            observable=summ["observable"], c_min_reference=summ["c_min"], seed=summ["seed"],
            equilibrated=summ["equilibrated"], equilibration_z=summ["equilibration_z"],
            n_steps=summ["n_steps"])

    def _write_bins(self, sub: str, bins: int) -> Path:
        edges = np.linspace(0.0, 1.0, bins + 1)
        return write_csv(self.path(sub, "bins.csv"), ["bin", "lower", "upper"],
                         zip(range(bins), edges[:-1], edges[1:]))

    def write_reference(self, stats: EnsembleStats, s_max: np.ndarray, meta: dict) -> list[Path]:
        out = self._write_stats(self.path("reference", "reference"), stats)
        out.append(write_csv(self.path("reference", "s_max.csv"), ["site", "S_max"],
                             zip(range(s_max.size), s_max)))
        out.append(self._write_bins("reference", stats.bins))
        out.append(write_json(self.path("reference", "meta.json"), meta))
        return out

    def read_reference(self) -> tuple[np.ndarray, EnsembleStats]:
        self.require("reference", "s_max.csv",
                     hint="run `morphofilter reference-entropy` first to build the "
                          "zero-force reference")
        _, rows = read_csv(self.path("reference", "s_max.csv"))
        s_max = np.array([float(r[1]) for r in rows])
        return s_max, self._read_stats(self.path("reference", "reference"))

    def write_sweep(self, series: SweepSeries, meta: dict) -> list[Path]:
        out = []
        index = series.provenance.get("indices") or list(range(len(series)))
        for i, stats in zip(index, series):
            out += self._write_stats(self.path("sweep", f"T{i:03d}"), stats)
        bins = series.entries[0].bins if series.entries else 0
        if bins:
            out.append(self._write_bins("sweep", bins))
        out.append(write_json(self.path("sweep", "sweep.json"), {
            "problem": series.spec.to_dict(), "provenance": series.provenance,
            "failures": series.failures, "indices": index,
            "temperatures": series.temperatures, **meta,
            "summaries": [e.summary() for e in series]}))
        return out

    def read_sweep(self) -> SweepSeries:
        doc = read_json(self.require("sweep", "sweep.json", hint="run `morphofilter sweep` first"))
        spec = ProblemSpec.from_dict(doc["problem"])
        entries = []
        for i in doc["indices"]:
            prefix = self.path("sweep", f"T{i:03d}")
            if not prefix.with_name(prefix.name + "_summary.json").exists():
                raise MissingArtifactError(f"missing {prefix}_summary.json; rerun the sweep")
            entries.append(self._read_stats(prefix))
        return SweepSeries(spec=spec, entries=entries, provenance=doc["provenance"],
                           failures=doc["failures"])
