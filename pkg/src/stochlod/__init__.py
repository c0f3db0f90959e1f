"""
stochlod
========

Numerical stochastic homogenization with localized orthogonal decomposition.

For every sample of a stationary random coefficient the package computes
localized element correctors on coarse-element patches, assembles the
quasi-local effective kernel, averages the kernels over samples and solves a
deterministic coarse problem with the averaged kernel.  The model error
estimator ``gamma`` and Monte Carlo L2 errors against fine-scale reference
solutions are available for convergence studies.

Basic example
-------------

.. code:: python

    from stochlod import (BoxDomain, FieldSpec, build_coarse_mesh, refine_uniform,
                          run_batch, average_kernels, estimate_gamma, solve_coarse)

    coarse = build_coarse_mesh(BoxDomain.unit(1), 16)
    fine = refine_uniform(coarse, 6)
    spec = FieldSpec(eps=1 / 256, lam=1.0, Lam=10.0)
    batch = run_batch(spec, coarse, fine, ell=4, n_samples=50)
    avg = average_kernels(batch)
    report = estimate_gamma(batch, avg)
    u_H = solve_coarse(avg, f=1.0).u
"""
from .corrector import (
    CorrectorSet,
    SingularSystemError,
    apply_correction,
    decay_profile,
    fit_decay_rate,
    prepare_patches,
    solve_all_correctors,
    solve_corrector,
)
from .fem import (
    FeFunction,
    QuasiInterpolator,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    build_quasi_interpolator,
    kernel_constraint_rows,
    prolongation,
)
from .kernel import SparseKernel, assemble_kernel, bilinear_form, coarse_matrix
from .mesh import BoxDomain, Mesh, Patch, build_coarse_mesh, default_ell, patch, refine_uniform
from .montecarlo import EstimatorReport, SampleBatch, average_kernels, estimate_gamma, run_batch
from .randomfield import CoefficientField, FieldSpec, empirical_covariance, sample_field
from .solver import CoarseSolution, ErrorReport, expected_l2_error, solve_coarse, solve_reference
from .study import ConfigError, ExperimentConfig, StudyTable, fit_rates, run_study

__version__ = "0.1.0"
