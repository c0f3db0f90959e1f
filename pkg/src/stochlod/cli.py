"""Command line driver.

Every subcommand reads an experiment config (YAML); flags override it.  The
single-step subcommands act on the first entries of the ``n_coarse`` and
``field.eps`` sweeps and chain through files in the output directory::

    stochlod assemble --config run.yaml     # out/batch/manifest.json
    stochlod average  --config run.yaml     # out/averaged_kernel.json
    stochlod gamma    --config run.yaml     # out/gamma.{json,csv}
    stochlod solve    --config run.yaml     # out/solution.json, out/error.{json,csv}

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .corrector import SingularSystemError, decay_profile, energy, fit_decay_rate, solve_all_correctors
from .fem import build_quasi_interpolator
from .kernel import SparseKernel
from .montecarlo import SampleBatch, SampleFailure, average_kernels, estimate_gamma, run_batch
from .randomfield import sample_field
from .solver import NumericalFailure, expected_l2_error, solve_coarse
from .study import ConfigError, ExperimentConfig, StudyTable, _number, fit_rates, run_study

log = logging.getLogger("stochlod")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _load_config(args) -> ExperimentConfig:
    overrides = list(args.override or [])
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    if args.seed is not None:
        overrides.append(f"master_seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(str(args.out))}")
    return ExperimentConfig.from_file(args.config, overrides)


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=True))
    return out


def _write_json(path: Path, payload, cfg: ExperimentConfig):
    data = json.loads(payload) if isinstance(payload, str) else dict(payload)
    data["config_hash"] = cfg.hash()
    path.write_text(json.dumps(data, indent=1))
    log.info("wrote %s", path)


def _single(cfg: ExperimentConfig):
    n, eps = cfg.n_coarse[0], cfg.eps_list[0]
    coarse, fine = cfg.meshes(n, eps)
    return cfg.field_spec(eps), coarse, fine, cfg.ell(coarse)


def _load_batch(out: Path) -> SampleBatch:
    manifest = out / "batch" / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"{manifest} not found; run 'assemble' first")
    return SampleBatch.load(manifest)


def _load_averaged(out: Path, batch: SampleBatch) -> SparseKernel:
    path = out / "averaged_kernel.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'average' first")
    return SparseKernel.load(path, batch.coarse)


def cmd_sample_field(cfg, args):
    spec, coarse, fine, _ = _single(cfg)
    out = _prepare_out(cfg)
    for i in range(args.index, args.index + args.count):
        field = sample_field(spec, fine, (cfg.master_seed, i))
        path = field.dump(out / f"field_{i:06d}")
        log.info("wrote %s", path)


def cmd_correctors(cfg, args):
    spec, coarse, fine, ell = _single(cfg)
    out = _prepare_out(cfg)
    interp = build_quasi_interpolator(coarse, fine)
    coeff = sample_field(spec, fine, (cfg.master_seed, args.index))
    correctors = solve_all_correctors(interp, coeff, ell)
    summary = []
    arrays = {}
    for c in correctors:
        theta = fit_decay_rate(decay_profile(c, fine)) if c.ell >= 2 else np.full(fine.d, np.nan)
        summary.append({
            "element": c.element,
            "patch": c.patch.elements.tolist(),
            "energy": energy(c, coeff, fine).tolist(),
            "theta": theta.tolist(),
        })
        arrays[f"dofs_{c.element}"] = c.dofs
        arrays[f"values_{c.element}"] = c.values
    np.savez(out / f"correctors_{args.index:06d}.npz", **arrays)
    _write_json(out / f"correctors_{args.index:06d}.json",
                {"ell": ell, "sample_index": args.index, "master_seed": cfg.master_seed, "elements": summary}, cfg)


def cmd_assemble(cfg, args):
    spec, coarse, fine, ell = _single(cfg)
    out = _prepare_out(cfg)
    batch = run_batch(spec, coarse, fine, ell, cfg.n_samples, cfg.master_seed, cfg.workers)
    manifest = batch.save(out / "batch")
    data = json.loads(manifest.read_text())
    data["config_hash"] = cfg.hash()
    manifest.write_text(json.dumps(data, indent=1))
    log.info("wrote %s", manifest)


def cmd_average(cfg, args):
    out = _prepare_out(cfg)
    averaged = average_kernels(_load_batch(out))
    averaged.save(out / "averaged_kernel.json")
    log.info("wrote %s", out / "averaged_kernel.json")


def cmd_gamma(cfg, args):
    out = _prepare_out(cfg)
    batch = _load_batch(out)
    report = estimate_gamma(batch, _load_averaged(out, batch))
    _write_json(out / "gamma.json", report.to_json(), cfg)
    (out / "gamma.csv").write_text(report.to_csv())
    print(f"gamma = {report.gamma:.6e} +/- {report.gamma_se:.2e} (N={report.n_samples})")


def cmd_solve(cfg, args):
    out = _prepare_out(cfg)
    batch = _load_batch(out)
    averaged = _load_averaged(out, batch)
    f = cfg.rhs()
    sol = solve_coarse(averaged, f)
    _write_json(out / "solution.json",
                {"u": sol.u.full().tolist(), "residual": sol.residual, "stats": sol.stats}, cfg)
    if args.no_error:
        return
    report = expected_l2_error(batch, averaged, f, sol, cfg.workers)
    _write_json(out / "error.json", report.to_json(), cfg)
    (out / "error.csv").write_text(report.to_csv())
    print(f"rmse = {report.rmse:.6e} +/- {report.rmse_se:.2e} (N={report.n_samples})")


def cmd_study(cfg, args):
    table = run_study(cfg)
    sys.stdout.write(table.to_csv())


def cmd_fit(cfg, args):
    path = Path(args.table) if args.table else cfg.out / "study.csv"
    if not path.exists():
        raise ConfigError(f"{path} not found; run 'study' first")
    table = StudyTable.from_csv(path.read_text())
    x_range = tuple(args.range) if args.range else None
    fit = fit_rates(table, args.regime, args.quantity, args.fixed, x_range)
    print(fit)
    target = cfg.out if args.table is None else path.parent
    target.mkdir(parents=True, exist_ok=True)
    _write_json(target / f"fit_{fit.x}_{fit.y}.json", fit.as_dict(), cfg)


COMMANDS = {
    "sample-field": (cmd_sample_field, "draw coefficient samples and dump them"),
    "correctors": (cmd_correctors, "solve all element correctors of one sample"),
    "assemble": (cmd_assemble, "offline phase: per-sample kernels and a batch manifest"),
    "average": (cmd_average, "average the batch kernels"),
    "gamma": (cmd_gamma, "model error estimator of the batch"),
    "solve": (cmd_solve, "online phase: coarse solve and Monte Carlo L2 error"),
    "study": (cmd_study, "full (H, eps) sweep with a CSV table"),
    "fit": (cmd_fit, "log-log rate fit over a study table"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64 bit)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--override", action="append", metavar="KEY=VAL",
                        help="override a config entry, dotted keys allowed (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stochlod", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("sample-field", "correctors"):
            p.add_argument("--index", type=int, default=0, help="first sample index")
        if name == "sample-field":
            p.add_argument("--count", type=int, default=1)
        if name == "solve":
            p.add_argument("--no-error", action="store_true", help="skip the fine reference solves")
        if name == "fit":
            p.add_argument("--table", help="study CSV (default OUT/study.csv)")
            p.add_argument("--regime", choices=["H", "eps"], default="H")
            p.add_argument("--quantity", choices=["rmse", "gamma"])
            p.add_argument("--fixed", type=_number, help="value of the other sweep variable")
            p.add_argument("--range", type=_number, nargs=2, metavar=("LO", "HI"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must be an unsigned 64 bit integer, got {args.seed}")
        cfg = _load_config(args)
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, SingularSystemError, SampleFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # fit with too few rows or mismatched artifacts
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
