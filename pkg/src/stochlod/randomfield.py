"""Stationary random coefficient fields with finite range of dependence.

A latent Gaussian field ``Y`` is obtained by filtering white noise, living on
an auxiliary grid, with a compactly supported bump of radius ``eps / 2``.  Two
points further than ``eps`` apart never share a noise variable, so ``Y`` (and
any pointwise function of it) has correlation length ``eps`` exactly.  The
coefficient is ``A = (lam + (Lam - lam) * S(Y)) * I`` with ``S`` the logistic
function.

Every sample draws its noise from its own counter-based stream keyed by
``(master_seed, sample_index, purpose)``; results therefore do not depend on
the order in which samples are generated.  Fields are bit-identical across runs
and worker counts on one platform; hardware that contracts multiply-adds
into FMA instructions differently may change the last bits.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

# stream purposes, part of the RNG key
FIELD = 0
BOOTSTRAP = 1
TEST_FUNCTIONS = 2


def rng_stream(master_seed: int, index: int, purpose: int = FIELD) -> np.random.Generator:
    """Philox stream keyed by ``(master_seed, index, purpose)``."""
    seq = np.random.SeedSequence([int(master_seed), int(index), int(purpose)])
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class FieldSpec:
    eps: float
    lam: float = 1.0
    Lam: float = 10.0
    xi: str = "logistic"
    k: int = 1
    isotropic: bool = True

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("correlation length must be positive")
        if not 0 < self.lam <= self.Lam:
            raise ValueError(f"need 0 < lam <= Lam, got lam={self.lam}, Lam={self.Lam}")
        if self.xi != "logistic":
            raise ValueError(f"unknown map {self.xi!r}")
        if self.k < 1:
            raise ValueError("need at least one latent channel")

    def channels(self, d: int) -> int:
        return 1 if self.isotropic else max(self.k, d)

    def check_mesh(self, mesh: Mesh):
        if self.eps > mesh.domain.lengths.min() / 4 * (1 + 1e-12):
            raise ValueError(f"eps={self.eps} exceeds a quarter of the smallest domain extent")
        if mesh.h > self.eps / 4 * (1 + 1e-12):
            raise ValueError(f"fine spacing {mesh.h} does not resolve eps={self.eps} (need h <= eps/4)")


@dataclass(eq=False)
class CoefficientField:
    """One realization: a symmetric ``d x d`` matrix per fine element."""

    mesh: Mesh
    values: np.ndarray
    spec: FieldSpec
    seed: tuple[int, int]

    @property
    def scalar(self) -> np.ndarray:
        return self.values[:, 0, 0]

    def dump(self, path) -> tuple[Path, Path]:
        """Write ``<path>.bin`` (little-endian float64) and a JSON sidecar."""
        path = Path(path)
        data = path.with_suffix(".bin")
        np.ascontiguousarray(self.values, dtype="<f8").tofile(data)
        meta = {
            "schema_version": 1,
            "spec": asdict(self.spec),
            "seed": {"master_seed": self.seed[0], "sample_index": self.seed[1]},
            "mesh_hash": self.mesh.key,
            "shape": list(self.values.shape),
        }
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps(meta, indent=1))
        return data, sidecar

    @classmethod
    def load(cls, path, mesh: Mesh) -> "CoefficientField":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta["mesh_hash"] != mesh.key:
            raise ValueError("field was sampled on a different mesh")
        values = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(meta["shape"])
        seed = (meta["seed"]["master_seed"], meta["seed"]["sample_index"])
        return cls(mesh, values, FieldSpec(**meta["spec"]), seed)


def _bump(r, radius):
    out = np.zeros_like(r)
    inside = r < radius
    s = r[inside] / radius
    out[inside] = np.exp(-1.0 / (1.0 - s * s))
    return out


class LatentFilter:
    """Sparse filter from white noise on the auxiliary grid to point values of ``Y``.

    The grid has the fine mesh spacing, is aligned with the mesh vertices, and
    covers the domain padded by ``eps``.  Rows are normalized so that ``Y`` has
    unit variance at every point.
    """

    def __init__(self, eps: float, mesh: Mesh):
        self.eps = float(eps)
        self.spacing = mesh.spacing
        pad = np.ceil(self.eps / self.spacing).astype(np.int64)
        self.origin = mesh.domain.lo - pad * self.spacing
        self.shape = tuple(int(v) for v in np.asarray(mesh.n) + 2 * pad + 1)
        self.size = int(np.prod(self.shape))

    def matrix(self, points: np.ndarray) -> sp.csr_matrix:
        points = np.atleast_2d(points)
        radius = self.eps / 2
        reach = np.ceil(radius / self.spacing).astype(np.int64)
        base = np.rint((points - self.origin) / self.spacing).astype(np.int64)
        offsets = np.array(list(itertools.product(*[range(-m, m + 1) for m in reach])))
        idx = base[:, None, :] + offsets[None, :, :]
        r = np.linalg.norm(idx * self.spacing + self.origin - points[:, None, :], axis=2)
        w = _bump(r, radius)
        if np.any((idx < 0) | (idx >= np.asarray(self.shape))):
            raise ValueError("points outside the padded noise grid")
        w /= np.sqrt((w * w).sum(axis=1, keepdims=True))
        flat = np.ravel_multi_index(tuple(np.moveaxis(idx, 2, 0)), self.shape)
        rows = np.repeat(np.arange(points.shape[0]), offsets.shape[0])
        M = sp.csr_matrix((w.ravel(), (rows, flat.ravel())), shape=(points.shape[0], self.size))
        M.eliminate_zeros()
        return M

    def noise(self, master_seed: int, index: int, channels: int = 1) -> np.ndarray:
        return rng_stream(master_seed, index, FIELD).standard_normal((self.size, channels))


_FILTER_CACHE: dict = {}


def _element_filter(spec: FieldSpec, mesh: Mesh):
    key = (spec.eps, mesh.key)
    if key not in _FILTER_CACHE:
        if len(_FILTER_CACHE) > 8:
            _FILTER_CACHE.clear()
        flt = LatentFilter(spec.eps, mesh)
        _FILTER_CACHE[key] = (flt, flt.matrix(mesh.barycenters))
    return _FILTER_CACHE[key]


def logistic(y):
    return 0.5 * (1.0 + np.tanh(0.5 * y))


def latent_field(spec: FieldSpec, fine_mesh: Mesh, seed: tuple[int, int]) -> np.ndarray:
    """Latent Gaussian values at the fine element barycenters, shape ``(ne, channels)``."""
    flt, Phi = _element_filter(spec, fine_mesh)
    return Phi @ flt.noise(seed[0], seed[1], spec.channels(fine_mesh.d))


def sample_field(spec: FieldSpec, fine_mesh: Mesh, seed: tuple[int, int]) -> CoefficientField:
    """Draw the coefficient for sample ``seed = (master_seed, sample_index)``."""
    spec.check_mesh(fine_mesh)
    d = fine_mesh.d
    Y = latent_field(spec, fine_mesh, seed)
    a = spec.lam + (spec.Lam - spec.lam) * logistic(Y)
    values = np.zeros((fine_mesh.n_elements, d, d))
    if spec.isotropic:
        values[:] = a[:, :1, None] * np.eye(d)
    else:
        diag = np.arange(d)
        values[:, diag, diag] = a[:, :d]
    return CoefficientField(fine_mesh, values, spec, (int(seed[0]), int(seed[1])))


@dataclass
class CovarianceEstimate:
    lag: float
    cov: float
    se: float
    translation_cov: np.ndarray
    translation_se: np.ndarray


def empirical_covariance(
    spec: FieldSpec,
    fine_mesh: Mesh,
    lags,
    n_samples: int,
    master_seed: int = 0,
    n_translations: int = 5,
) -> list[CovarianceEstimate]:
    """Monte Carlo covariance of the scalar latent field along the first axis.

    Base points are fine element barycenters spread over the domain at
    mutual distance larger than ``eps`` where room allows; each lag is
    rounded to a multiple of the fine spacing.  The pooled estimate averages
    the per-translation sample covariances.
    """
    if n_samples < 100:
        raise ValueError("need at least 100 samples")
    spec.check_mesh(fine_mesh)
    h = fine_mesh.spacing[0]
    steps = [int(round(lag / h)) for lag in lags]
    lo, hi = fine_mesh.domain.lo[0], fine_mesh.domain.hi[0]
    x0 = fine_mesh.barycenters[0].copy()
    span = hi - lo - max(steps) * h - h
    if span <= 0:
        raise ValueError("largest lag does not fit in the domain")
    shifts = np.floor(np.linspace(0, span, n_translations) / h) * h
    base = np.repeat(x0[None, :], n_translations, axis=0)
    base[:, 0] += shifts
    points = [base] + [base + np.eye(fine_mesh.d)[0] * (m * h) for m in steps]
    flt = LatentFilter(spec.eps, fine_mesh)
    Phi = flt.matrix(np.concatenate(points))

    Y = np.empty((n_samples, Phi.shape[0]))
    for i in range(n_samples):
        Y[i] = Phi @ flt.noise(master_seed, i, 1)[:, 0]
    Y0 = Y[:, :n_translations]
    out = []
    for j, m in enumerate(steps):
        Yl = Y[:, (j + 1) * n_translations:(j + 2) * n_translations]
        prod = (Y0 - Y0.mean(axis=0)) * (Yl - Yl.mean(axis=0))
        tcov = prod.sum(axis=0) / (n_samples - 1)
        tse = prod.std(axis=0, ddof=1) / np.sqrt(n_samples)
        pooled = prod.mean(axis=1)
        out.append(CovarianceEstimate(m * h, float(tcov.mean()), float(pooled.std(ddof=1) / np.sqrt(n_samples)), tcov, tse))
    return out
