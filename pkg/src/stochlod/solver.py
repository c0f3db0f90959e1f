"""Coarse solve with the averaged kernel and Monte Carlo error against fine references."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .fem import FeFunction, assemble_load, assemble_mass, assemble_stiffness, prolongation
from .kernel import SparseKernel, coarse_matrix
from .montecarlo import SampleBatch, parallel_map
from .randomfield import BOOTSTRAP, rng_stream, sample_field

log = logging.getLogger(__name__)

_DENSE_CHECK_LIMIT = 4000


class NumericalFailure(RuntimeError):
    pass


@dataclass(eq=False)
class CoarseSolution:
    u: FeFunction
    residual: float
    stats: dict = field(default_factory=dict)


def _relative_residual(M, x, b) -> float:
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(M @ x - b) / nb) if nb > 0 else float(np.linalg.norm(M @ x))


def solve_coarse(averaged: SparseKernel, f=1.0, check_coercivity: bool = True) -> CoarseSolution:
    """Solve ``M u = b`` with the (generally nonsymmetric) kernel matrix."""
    mesh = averaged.mesh
    M = coarse_matrix(averaged).tocsc()
    b = assemble_load(mesh, f)
    stats = {"n": M.shape[0], "nnz": M.nnz}
    if check_coercivity and 0 < M.shape[0] <= _DENSE_CHECK_LIMIT:
        S = M.toarray()
        lam_min = float(sla.eigvalsh(0.5 * (S + S.T))[0])
        stats["sym_min_eig"] = lam_min
        if lam_min <= 0:
            raise NumericalFailure(f"symmetric part of the coarse matrix is not positive definite ({lam_min:.3e})")
    if not np.any(b):
        u = np.zeros_like(b)
    else:
        try:
            u = spla.splu(M).solve(b)
        except RuntimeError as exc:
            raise NumericalFailure(f"coarse system is singular: {exc}") from exc
    res = _relative_residual(M, u, b)
    if res > 1e-10:
        raise NumericalFailure(f"coarse solve residual {res:.2e}")
    return CoarseSolution(FeFunction(mesh, u, "coarse"), res, stats)


def solve_reference(coeff, f=1.0) -> FeFunction:
    """P1 finite element solution on the fine mesh carrying the coefficient."""
    mesh = coeff.mesh
    K = assemble_stiffness(mesh, coeff).tocsc()
    b = assemble_load(mesh, f)
    if not np.any(b):
        return FeFunction(mesh, np.zeros_like(b), "fine")
    u = spla.splu(K).solve(b)
    res = _relative_residual(K, u, b)
    if res > 1e-10:
        raise NumericalFailure(f"reference solve residual {res:.2e}")
    return FeFunction(mesh, u, "fine")


@dataclass(eq=False)
class ErrorReport:
    rmse: float
    rmse_se: float
    errors: np.ndarray
    n_samples: int
    f: str
    H: float
    eps: float
    ell: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "rmse": self.rmse,
                "rmse_se": self.rmse_se,
                "N": self.n_samples,
                "f": self.f,
                "H": self.H,
                "eps": self.eps,
                "ell": self.ell,
                "errors": self.errors.tolist(),
            },
            indent=1,
        )

    def to_csv(self) -> str:
        lines = ["sample,l2_error"] + [f"{i},{e!r}" for i, e in enumerate(self.errors.tolist())]
        return "\n".join(lines) + "\n"


_ERR_CONTEXT: dict = {}


def _setup_errors(spec, fine, master_seed, f, uH_fine):
    _ERR_CONTEXT.update(spec=spec, fine=fine, master_seed=master_seed, f=f, uH=uH_fine, M=assemble_mass(fine))


def _sample_error(index: int) -> float:
    c = _ERR_CONTEXT
    coeff = sample_field(c["spec"], c["fine"], (c["master_seed"], index))
    e = solve_reference(coeff, c["f"]).values - c["uH"]
    return float(np.sqrt(max(e @ (c["M"] @ e), 0.0)))


def expected_l2_error(
    batch: SampleBatch,
    averaged: SparseKernel,
    f=1.0,
    coarse_solution: CoarseSolution | None = None,
    workers: int = 1,
    n_boot: int = 200,
) -> ErrorReport:
    """Root mean square over the batch samples of ``||u_h(w) - u_H||_{L2}``."""
    if averaged.mesh.key != batch.coarse.key:
        raise ValueError("averaged kernel and batch use different coarse meshes")
    if coarse_solution is None:
        coarse_solution = solve_coarse(averaged, f)
    uH_fine = prolongation(batch.coarse, batch.fine) @ coarse_solution.u.values
    errors = np.array(
        parallel_map(
            _sample_error, batch.indices.tolist(), workers,
            initializer=_setup_errors, initargs=(batch.spec, batch.fine, batch.master_seed, f, uH_fine),
        )
    )
    sq = errors**2
    rmse = float(np.sqrt(sq.mean()))
    N = errors.size
    if N > 1:
        rng = rng_stream(batch.master_seed, N, BOOTSTRAP)
        boots = [np.sqrt(sq[rng.integers(0, N, N)].mean()) for _ in range(n_boot)]
        se = float(np.std(boots, ddof=1))
    else:
        se = 0.0
    return ErrorReport(rmse, se, errors, N, describe(f), batch.coarse.H, batch.spec.eps, batch.ell)


def describe(f) -> str:
    return getattr(f, "description", None) or (repr(float(f)) if not callable(f) else getattr(f, "__name__", "callable"))
