"""Sample pipelines, kernel averaging and the model error estimator.

Sample ``i`` of a batch uses the coefficient stream ``(master_seed, i)``.
All reductions run over samples in index order, so results do not depend on
the number of worker processes.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corrector import prepare_patches, solve_all_correctors
from .fem import build_quasi_interpolator
from .kernel import SparseKernel, assemble_kernel
from .mesh import Mesh
from .randomfield import BOOTSTRAP, FieldSpec, rng_stream, sample_field

log = logging.getLogger(__name__)


class SampleFailure(RuntimeError):
    """A sample pipeline failed; the message names the sample."""


@dataclass(eq=False)
class SampleBatch:
    spec: FieldSpec
    coarse: Mesh
    fine: Mesh
    ell: int
    master_seed: int
    indices: np.ndarray
    kernels: list
    timings: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.indices)

    def save(self, directory) -> Path:
        """Write one kernel file per sample and a JSON manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        samples = []
        for i, k in zip(self.indices, self.kernels):
            name = f"kernel_{int(i):06d}.json"
            k.save(directory / name)
            samples.append({"index": int(i), "path": name})
        manifest = {
            "schema_version": 1,
            "spec": asdict(self.spec),
            "master_seed": int(self.master_seed),
            "ell": int(self.ell),
            "mesh_hash": self.coarse.key,
            "fine_mesh_hash": self.fine.key,
            "domain": [list(e) for e in self.coarse.domain.extents],
            "n_coarse": list(self.coarse.n),
            "n_fine": list(self.fine.n),
            "samples": samples,
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, manifest_path) -> "SampleBatch":
        from .mesh import BoxDomain, build_coarse_mesh, refine_uniform

        manifest_path = Path(manifest_path)
        m = json.loads(manifest_path.read_text())
        domain = BoxDomain(tuple(tuple(e) for e in m["domain"]))
        coarse = build_coarse_mesh(domain, m["n_coarse"])
        levels = int(np.log2(m["n_fine"][0] // m["n_coarse"][0]))
        fine = refine_uniform(coarse, levels)
        if coarse.key != m["mesh_hash"] or fine.key != m["fine_mesh_hash"]:
            raise ValueError("manifest mesh hash does not match the rebuilt meshes")
        kernels = [SparseKernel.load(manifest_path.parent / s["path"], coarse) for s in m["samples"]]
        indices = np.array([s["index"] for s in m["samples"]], dtype=np.int64)
        return cls(FieldSpec(**m["spec"]), coarse, fine, m["ell"], m["master_seed"], indices, kernels)


_CONTEXT: dict = {}


def _setup(spec, coarse, fine, ell, master_seed):
    key = (coarse.key, fine.key, ell)
    if _CONTEXT.get("key") != key:
        interp = build_quasi_interpolator(coarse, fine)
        _CONTEXT.update(key=key, interp=interp, prepared=prepare_patches(interp, ell))
    _CONTEXT.update(spec=spec, coarse=coarse, fine=fine, ell=ell, master_seed=master_seed)


def _run_sample(index: int) -> SparseKernel:
    c = _CONTEXT
    try:
        coeff = sample_field(c["spec"], c["fine"], (c["master_seed"], index))
        correctors = solve_all_correctors(c["interp"], coeff, c["ell"], c["prepared"])
        return assemble_kernel(correctors, coeff, c["coarse"])
    except Exception as exc:
        raise SampleFailure(f"sample {index}: {exc}") from exc


def parallel_map(fn, items, workers: int, initializer=None, initargs=()):
    """Ordered map over ``items``, in-process when ``workers <= 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(i) for i in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(workers, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def run_batch(
    spec: FieldSpec,
    coarse: Mesh,
    fine: Mesh,
    ell: int,
    n_samples: int,
    master_seed: int = 0,
    workers: int = 1,
    first_index: int = 0,
) -> SampleBatch:
    """Field, correctors and kernel for samples ``first_index .. first_index + n_samples - 1``."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    spec.check_mesh(fine)
    indices = np.arange(first_index, first_index + n_samples, dtype=np.int64)
    t0 = time.perf_counter()
    kernels = parallel_map(
        _run_sample, indices.tolist(), workers, initializer=_setup,
        initargs=(spec, coarse, fine, ell, master_seed),
    )
    elapsed = time.perf_counter() - t0
    log.info("batch of %d samples (ell=%d) in %.2fs", n_samples, ell, elapsed)
    return SampleBatch(spec, coarse, fine, ell, master_seed, indices, kernels, {"samples_s": elapsed})


def _kernels(batch) -> list[SparseKernel]:
    return batch.kernels if isinstance(batch, SampleBatch) else list(batch)


def _union_pairs(kernels) -> np.ndarray:
    codes = np.unique(np.concatenate([k._codes() for k in kernels]))
    n = kernels[0].mesh.n_elements
    return np.column_stack([codes // n, codes % n])


def _dense_blocks(kernel: SparseKernel, pairs: np.ndarray) -> np.ndarray:
    d = kernel.mesh.d
    out = np.zeros((pairs.shape[0], d, d))
    pos = kernel.index(pairs)
    hit = pos >= 0
    out[hit] = kernel.blocks[pos[hit]]
    return out


def _check_consistent(kernels):
    if not kernels:
        raise ValueError("empty batch")
    ref = kernels[0]
    for k in kernels[1:]:
        if k.mesh_hash != ref.mesh_hash or k.ell != ref.ell:
            raise ValueError("kernels differ in mesh or oversampling order")


def average_kernels(batch) -> SparseKernel:
    """Entrywise empirical mean over the samples, on the union sparsity pattern."""
    kernels = _kernels(batch)
    _check_consistent(kernels)
    pairs = _union_pairs(kernels)
    first = _dense_blocks(kernels[0], pairs)
    total = first.copy()
    constant = np.ones(first.shape, dtype=bool)
    for k in kernels[1:]:
        blocks = _dense_blocks(k, pairs)
        total += blocks
        constant &= blocks == first
    mean = total / len(kernels)
    # entries equal in every sample keep their value exactly (no rounding in sum / N)
    mean[constant] = first[constant]
    ref = kernels[0]
    return SparseKernel(ref.mesh, ref.ell, pairs, mean, {"averaged": len(kernels)})


@dataclass(eq=False)
class EstimatorReport:
    """Per-sample, per-element ``X(T)`` and the estimator ``gamma``."""

    X: np.ndarray
    gamma: float
    gamma_se: float
    n_samples: int
    norm: str = "fro"
    independent: bool = False

    @property
    def rms(self) -> np.ndarray:
        return np.sqrt(np.mean(self.X**2, axis=0))

    def to_json(self) -> str:
        return json.dumps(
            {
                "gamma": self.gamma,
                "gamma_se": self.gamma_se,
                "N": self.n_samples,
                "norm": self.norm,
                "independent": self.independent,
                "rms_X": self.rms.tolist(),
            },
            indent=1,
        )

    def to_csv(self) -> str:
        lines = ["element,rms_X"] + [f"{T},{v!r}" for T, v in enumerate(self.rms.tolist())]
        lines.append(f"# gamma={self.gamma!r},gamma_se={self.gamma_se!r},N={self.n_samples}")
        return "\n".join(lines) + "\n"


def _gamma(X2: np.ndarray) -> float:
    return float(np.sqrt(X2.mean(axis=0)).max())


def estimate_gamma(
    batch,
    averaged: SparseKernel,
    independent: bool = False,
    n_boot: int = 200,
    seed: int | None = None,
) -> EstimatorReport:
    """``gamma = max_T sqrt(mean_samples X(T)^2)`` with a bootstrap standard error.

    ``X(T) = |T| max_K ||block(T, K) - averaged(T, K)||_F``; blocks outside
    both sparsity patterns vanish and do not contribute.
    """
    kernels = _kernels(batch)
    _check_consistent(kernels + [averaged])
    mesh = averaged.mesh
    pairs = _union_pairs(kernels + [averaged])
    mean = _dense_blocks(averaged, pairs)
    X = np.zeros((len(kernels), mesh.n_elements))
    for n, k in enumerate(kernels):
        diff = np.linalg.norm(_dense_blocks(k, pairs) - mean, axis=(1, 2))
        np.maximum.at(X[n], pairs[:, 0], diff)
    X *= mesh.volumes[None, :]
    X2 = X**2
    gamma = _gamma(X2)
    if seed is None:
        seed = getattr(batch, "master_seed", 0)
    rng = rng_stream(seed, len(kernels), BOOTSTRAP)
    N = len(kernels)
    boots = [_gamma(X2[rng.integers(0, N, N)]) for _ in range(n_boot)] if N > 1 else [gamma]
    return EstimatorReport(X, gamma, float(np.std(boots, ddof=1)) if N > 1 else 0.0, N, "fro", independent)
