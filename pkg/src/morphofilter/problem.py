"""Compliance minimization on a regular 2D grid of bilinear quads.

Nodes and elements are numbered column-major (top to bottom, then left to
right) as in the classic 88-line code: element ``e = ex * nely + ey`` and node
``n = ix * (nely + 1) + iy``; DOFs are ``2n`` (x) and ``2n + 1`` (y).

All public evaluation functions take the *design* densities ``x``. The density
filter is applied internally, so compliance and its gradient are functions of
``x`` through the filtered (physical) field.
"""
from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, solveh_banded


class ProblemError(ValueError):
    """Invalid problem definition."""

    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message)
        self.field_name = field_name


class SingularSystemError(ProblemError):
    """The supports do not remove every rigid-body mode."""


def element_stiffness(nu: float = 0.3) -> np.ndarray:
    """Unit-modulus plane-stress stiffness matrix of a unit square Q4 element."""
    k = np.array([1 / 2 - nu / 6, 1 / 8 + nu / 8, -1 / 4 - nu / 12, -1 / 8 + 3 * nu / 8,
                  -1 / 4 + nu / 12, -1 / 8 - nu / 8, nu / 6, 1 / 8 - 3 * nu / 8])
    idx = np.array([
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ])
    return k[idx] / (1 - nu ** 2)


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable definition of a 2D compliance-minimization problem.

    ``supports`` is a tuple of fixed DOF indices and ``loads`` a tuple of
    ``(dof, magnitude)`` pairs. Use :meth:`cantilever` for the default
    benchmark.
    """

    nelx: int
    nely: int
    volume_fraction: float
    supports: tuple[int, ...]
    loads: tuple[tuple[int, float], ...]
    penalization: float = 3.0
    filter_radius: float = 1.5
    youngs_modulus_solid: float = 1.0
    youngs_modulus_min: float = 1e-9
    poisson_ratio: float = 0.3
    bc_preset: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if int(self.nelx) != self.nelx or self.nelx < 1:
            raise ProblemError("nelx must be an integer >= 1", "nelx")
        if int(self.nely) != self.nely or self.nely < 1:
            raise ProblemError("nely must be an integer >= 1", "nely")
        if not 0.0 < self.volume_fraction < 1.0:
            raise ProblemError("vol_frac must lie in (0, 1)", "vol_frac")
        if not 0.0 < self.youngs_modulus_min < self.youngs_modulus_solid:
            raise ProblemError("need 0 < Emin < E", "Emin")
        if not -1.0 < self.poisson_ratio < 0.5:
            raise ProblemError("nu must lie in (-1, 0.5)", "nu")
        if self.penalization < 1.0:
            raise ProblemError("penal must be >= 1", "penal")
        if self.filter_radius < 1.0:
            raise ProblemError("rmin must be >= 1", "rmin")
        object.__setattr__(self, "supports", tuple(sorted({int(d) for d in self.supports})))
        object.__setattr__(self, "loads", tuple((int(d), float(m)) for d, m in self.loads))
        if not self.loads:
            raise ProblemError("loads must be nonempty", "loads")
        ndof = self.n_dofs
        for d in self.supports:
            if not 0 <= d < ndof:
                raise ProblemError(f"support DOF {d} out of range", "supports")
        for d, _ in self.loads:
            if not 0 <= d < ndof:
                raise ProblemError(f"load DOF {d} out of range", "loads")
        self._check_rigid_modes()

    @property
    def n_elements(self) -> int:
        return self.nelx * self.nely

    @property
    def n_dofs(self) -> int:
        return 2 * (self.nelx + 1) * (self.nely + 1)

    @property
    def target_volume(self) -> float:
        return self.volume_fraction * self.n_elements

    @property
    def has_load(self) -> bool:
        return any(m != 0.0 for _, m in self.loads)

    def node(self, ix: int, iy: int) -> int:
        return ix * (self.nely + 1) + iy

    def _check_rigid_modes(self):
        # K restricted to free DOFs is nonsingular iff no rigid-body motion
        # (two translations, one rotation) vanishes on every fixed DOF.
        nodes = np.arange((self.nelx + 1) * (self.nely + 1))
        px, py = nodes // (self.nely + 1), nodes % (self.nely + 1)
        modes = np.zeros((self.n_dofs, 3))
        modes[0::2, 0] = 1.0
        modes[1::2, 1] = 1.0
        modes[0::2, 2] = -py
        modes[1::2, 2] = px
        fixed = modes[list(self.supports)]
        if fixed.size == 0 or np.linalg.matrix_rank(fixed) < 3:
            raise SingularSystemError(
                "supports leave a rigid-body mode unconstrained; stiffness system is singular",
                "supports")

    def force_vector(self) -> np.ndarray:
        f = np.zeros(self.n_dofs)
        for d, m in self.loads:
            f[d] += m
        return f

    @classmethod
    def cantilever(cls, nelx: int = 32, nely: int = 16, volume_fraction: float = 0.5,
                   load: float = -1.0, **kwargs) -> "ProblemSpec":
        """Left edge clamped, point load on the y DOF at mid-height of the right edge."""
        supports = tuple(range(2 * (nely + 1)))
        load_node = nelx * (nely + 1) + nely // 2
        return cls(nelx=nelx, nely=nely, volume_fraction=volume_fraction,
                   supports=supports, loads=((2 * load_node + 1, load),),
                   bc_preset="cantilever", **kwargs)

    @classmethod
    def mbb(cls, nelx: int = 60, nely: int = 20, volume_fraction: float = 0.5,
            load: float = -1.0, **kwargs) -> "ProblemSpec":
        """Half MBB beam: symmetry on the left edge, roller at bottom right, load top left."""
        left_x = tuple(2 * iy for iy in range(nely + 1))
        roller = 2 * (nelx * (nely + 1) + nely) + 1
        return cls(nelx=nelx, nely=nely, volume_fraction=volume_fraction,
                   supports=left_x + (roller,), loads=((1, load),),
                   bc_preset="mbb", **kwargs)

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "nelx": self.nelx, "nely": self.nely, "vol_frac": self.volume_fraction,
            "penal": self.penalization, "rmin": self.filter_radius,
            "E": self.youngs_modulus_solid, "Emin": self.youngs_modulus_min,
            "nu": self.poisson_ratio,
        }
        if self.bc_preset is not None and self == _from_preset(self.bc_preset, d, self.loads):
            d["bc_preset"] = self.bc_preset
            d["load"] = self.loads[0][1]
        else:
            d["supports"] = list(self.supports)
            d["loads"] = [[dof, mag] for dof, mag in self.loads]
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProblemSpec":
        for key in ("nelx", "nely", "vol_frac"):
            if key not in data:
                raise ProblemError(f"missing required field '{key}'", key)
        common = dict(
            penalization=float(data.get("penal", 3.0)),
            filter_radius=float(data.get("rmin", 1.5)),
            youngs_modulus_solid=float(data.get("E", 1.0)),
            youngs_modulus_min=float(data.get("Emin", 1e-9)),
            poisson_ratio=float(data.get("nu", 0.3)),
        )
        nelx, nely, vf = data["nelx"], data["nely"], float(data["vol_frac"])
        preset = data.get("bc_preset")
        if preset is not None:
            builder = _PRESETS.get(preset)
            if builder is None:
                raise ProblemError(f"unknown bc_preset '{preset}'", "bc_preset")
            return builder(nelx, nely, vf, load=float(data.get("load", -1.0)), **common)
        if "supports" not in data:
            raise ProblemError("missing required field 'supports' (or 'bc_preset')", "supports")
        if "loads" not in data or not data["loads"]:
            raise ProblemError("missing required field 'loads' (or 'bc_preset')", "loads")
        return cls(nelx=nelx, nely=nely, volume_fraction=vf,
                   supports=tuple(data["supports"]),
                   loads=tuple((d, m) for d, m in data["loads"]), **common)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ProblemSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        """Stable hash of the full problem definition."""
        payload = json.dumps({
            "nelx": self.nelx, "nely": self.nely, "vol_frac": self.volume_fraction,
            "penal": self.penalization, "rmin": self.filter_radius,
            "E": self.youngs_modulus_solid, "Emin": self.youngs_modulus_min,
            "nu": self.poisson_ratio, "supports": list(self.supports),
            "loads": [list(ld) for ld in self.loads],
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_PRESETS = {"cantilever": ProblemSpec.cantilever, "mbb": ProblemSpec.mbb}


def _from_preset(name, d, loads):
    builder = _PRESETS.get(name)
    if builder is None or len(loads) != 1:
        return None
    return builder(d["nelx"], d["nely"], d["vol_frac"], load=loads[0][1],
                   penalization=d["penal"], filter_radius=d["rmin"],
                   youngs_modulus_solid=d["E"], youngs_modulus_min=d["Emin"],
                   poisson_ratio=d["nu"])


class FEModel:
    """Precomputed structure for repeated solves on one :class:`ProblemSpec`.

    The stiffness matrix is assembled directly into LAPACK upper-banded
    storage over the free DOFs and factorized by banded Cholesky on every
    call; only the sparsity bookkeeping is cached.
    """

    def __init__(self, spec: ProblemSpec):
        self.spec = spec
        nelx, nely = spec.nelx, spec.nely
        self.ke = element_stiffness(spec.poisson_ratio)
        ex, ey = np.divmod(np.arange(spec.n_elements), nely)
        n1 = ex * (nely + 1) + ey
        n2 = (ex + 1) * (nely + 1) + ey
        # element DOFs in the 88-line order: lower-left, lower-right, upper-right, upper-left
        self.edof = np.stack([2 * n1 + 2, 2 * n1 + 3, 2 * n2 + 2, 2 * n2 + 3,
                              2 * n2, 2 * n2 + 1, 2 * n1, 2 * n1 + 1], axis=1)
        self.force = spec.force_vector()
        fixed = np.zeros(spec.n_dofs, dtype=bool)
        fixed[list(spec.supports)] = True
        self.free = np.flatnonzero(~fixed)
        reduced = np.full(spec.n_dofs, -1)
        reduced[self.free] = np.arange(self.free.size)
        self._build_band(reduced)
        self.f_free = self.force[self.free]
        self.H, self.Hs = build_filter(nelx, nely, spec.filter_radius)
        self._identity_filter = spec.filter_radius <= 1.0

    def _build_band(self, reduced):
        r = reduced[self.edof]                       # (nel, 8)
        a, b = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
        ri, rj = r[:, a.ravel()], r[:, b.ravel()]    # (nel, 64)
        keep = (ri >= 0) & (rj >= 0) & (ri <= rj)
        elem = np.broadcast_to(np.arange(r.shape[0])[:, None], ri.shape)[keep]
        kev = np.broadcast_to(self.ke[a.ravel(), b.ravel()], ri.shape)[keep]
        i, j = ri[keep], rj[keep]
        n = self.free.size
        self.bandwidth = int((j - i).max()) if j.size else 0
        self._band_shape = (self.bandwidth + 1, n)
        self._flat = (self.bandwidth + i - j) * n + j
        self._pair_elem = elem
        self._pair_ke = kev

    # -- filter -------------------------------------------------------------

    def filter(self, x: np.ndarray) -> np.ndarray:
        if self._identity_filter:
            return np.array(x, dtype=float)
        return (self.H @ x) / self.Hs

    def filter_chain_rule(self, g: np.ndarray) -> np.ndarray:
        if self._identity_filter:
            return np.array(g, dtype=float)
        return self.H.T @ (g / self.Hs)

    # -- analysis -----------------------------------------------------------

    def moduli(self, xphys: np.ndarray) -> np.ndarray:
        s = self.spec
        return s.youngs_modulus_min + xphys ** s.penalization * (
            s.youngs_modulus_solid - s.youngs_modulus_min)

    def solve_physical(self, xphys: np.ndarray) -> np.ndarray:
        """Nodal displacements for a given filtered density field."""
        u = np.zeros(self.spec.n_dofs)
        if not np.any(self.f_free):
            return u
        weights = self.moduli(xphys)[self._pair_elem] * self._pair_ke
        ab = np.bincount(self._flat, weights=weights,
                         minlength=self._band_shape[0] * self._band_shape[1])
        ab = ab.reshape(self._band_shape)
        try:
            u[self.free] = solveh_banded(ab, self.f_free, lower=False,
                                         check_finite=False)
        except LinAlgError as exc:
            raise SingularSystemError(f"stiffness factorization failed: {exc}") from exc
        return u

    def compliance_and_gradient(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Compliance and its gradient with respect to the design densities."""
        xphys = self.filter(x)
        u = self.solve_physical(xphys)
        ue = u[self.edof]
        ce = np.einsum("ij,jk,ik->i", ue, self.ke, ue)
        s = self.spec
        c = float(np.dot(self.moduli(xphys), ce))
        dc = -s.penalization * xphys ** (s.penalization - 1) * (
            s.youngs_modulus_solid - s.youngs_modulus_min) * ce
        return c, self.filter_chain_rule(dc)

    def compliance(self, x: np.ndarray) -> float:
        u = self.solve_physical(self.filter(x))
        return float(self.force @ u)


def build_filter(nelx: int, nely: int, rmin: float) -> tuple[sp.csr_matrix, np.ndarray]:
    """Conic density-filter weights ``max(0, rmin - dist)`` between element centres."""
    reach = int(np.ceil(rmin)) - 1
    rows, cols, vals = [], [], []
    ex, ey = np.divmod(np.arange(nelx * nely), nely)
    for dx in range(-reach, reach + 1):
        for dy in range(-reach, reach + 1):
            w = rmin - np.hypot(dx, dy)
            if w <= 0:
                continue
            jx, jy = ex + dx, ey + dy
            ok = (jx >= 0) & (jx < nelx) & (jy >= 0) & (jy < nely)
            rows.append(np.flatnonzero(ok))
            cols.append(jx[ok] * nely + jy[ok])
            vals.append(np.full(ok.sum(), w))
    n = nelx * nely
    H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    return H, np.asarray(H.sum(axis=1)).ravel()


@functools.lru_cache(maxsize=32)
def fe_model(spec: ProblemSpec) -> FEModel:
    return FEModel(spec)


def _check_design(spec: ProblemSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n_elements,):
        raise ProblemError(f"design field must have length {spec.n_elements}", "x")
    if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
        raise ProblemError("design densities must lie in [0, 1]", "x")
    return x


def assemble_and_solve(spec: ProblemSpec, x) -> np.ndarray:
    """Nodal displacement vector ``u`` solving ``K(x) u = f``."""
    m = fe_model(spec)
    return m.solve_physical(m.filter(_check_design(spec, x)))


def compliance(spec: ProblemSpec, x) -> float:
    return fe_model(spec).compliance(_check_design(spec, x))


def compliance_gradient(spec: ProblemSpec, x) -> np.ndarray:
    return fe_model(spec).compliance_and_gradient(_check_design(spec, x))[1]


def density_filter(spec: ProblemSpec, x) -> np.ndarray:
    return fe_model(spec).filter(np.asarray(x, dtype=float))


def filter_chain_rule(spec: ProblemSpec, g) -> np.ndarray:
    return fe_model(spec).filter_chain_rule(np.asarray(g, dtype=float))
