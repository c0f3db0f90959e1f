"""Experiment configuration, (H, eps) sweeps and log-log rate fits."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .mesh import BoxDomain, build_coarse_mesh, default_ell, refine_uniform
from .montecarlo import average_kernels, estimate_gamma, run_batch
from .randomfield import FieldSpec
from .solver import expected_l2_error, solve_coarse

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
COLUMNS = ["d", "H", "eps", "ell", "N", "rmse", "rmse_se", "gamma", "gamma_se", "t_offline_s", "t_online_s"]
MODES = ("correctors", "assemble", "solve", "study", "gamma")

DEFAULTS = {
    "d": 1,
    "domain": None,
    "n_coarse": [16],
    "refine": "auto",
    "h_ratio": 4,
    "ell": "auto",
    "field": {"eps": [1 / 64], "lam": 1.0, "Lam": 10.0, "xi": "logistic", "k": 1, "isotropic": True},
    "n_samples": 10,
    "master_seed": 0,
    "f": 1.0,
    "out": "results",
    "mode": "study",
    "record_timings": True,
    "workers": 1,
}
# keys that may change between runs without changing any result
_UNHASHED = ("workers", "out")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors) if not isinstance(errors, str) else [errors]
        super().__init__("; ".join(self.errors))


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, item: str) -> dict:
    """Apply ``KEY=VAL`` with dotted keys; ``VAL`` is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form KEY=VAL")
    key, val = item.split("=", 1)
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(val)
    return cfg


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _number(v):
    if isinstance(v, str):
        # allow fractions such as 1/512 in config files
        num, _, den = v.partition("/")
        return float(num) / float(den) if den else float(num)
    return float(v)


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_file(cls, path=None, overrides=()) -> "ExperimentConfig":
        data = {}
        if path is not None:
            loaded = yaml.safe_load(Path(path).read_text())
            if loaded is not None and not isinstance(loaded, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            data = loaded or {}
        return cls.from_dict(data, overrides)

    @classmethod
    def from_dict(cls, data: dict, overrides=()) -> "ExperimentConfig":
        raw = _merge(DEFAULTS, data)
        for item in overrides:
            apply_override(raw, item)
        cfg = cls(raw)
        cfg.validate()
        return cfg

    # resolved views -------------------------------------------------------
    @property
    def d(self) -> int:
        return int(self.raw["d"])

    @property
    def domain(self) -> BoxDomain:
        ext = self.raw["domain"] or [[0.0, 1.0]] * self.d
        return BoxDomain(tuple((float(lo), float(hi)) for lo, hi in ext))

    @property
    def n_coarse(self) -> list[int]:
        return [int(n) for n in _as_list(self.raw["n_coarse"])]

    @property
    def eps_list(self) -> list[float]:
        return [_number(e) for e in _as_list(self.raw["field"]["eps"])]

    @property
    def n_samples(self) -> int:
        return int(self.raw["n_samples"])

    @property
    def master_seed(self) -> int:
        return int(self.raw["master_seed"])

    @property
    def workers(self) -> int:
        return int(self.raw["workers"])

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    def field_spec(self, eps: float) -> FieldSpec:
        fs = self.raw["field"]
        return FieldSpec(eps=eps, lam=float(fs["lam"]), Lam=float(fs["Lam"]), xi=fs["xi"],
                         k=int(fs["k"]), isotropic=bool(fs["isotropic"]))

    def refine_levels(self, n: int, eps: float) -> int:
        if self.raw["refine"] != "auto":
            return int(self.raw["refine"])
        spacing = (self.domain.lengths / n).max()
        target = eps / float(self.raw["h_ratio"])
        return max(0, math.ceil(math.log2(spacing / target) - 1e-12))

    def meshes(self, n: int, eps: float):
        coarse = build_coarse_mesh(self.domain, n)
        return coarse, refine_uniform(coarse, self.refine_levels(n, eps))

    def ell(self, coarse) -> int:
        e = self.raw["ell"]
        return default_ell(coarse.H) if e == "auto" else int(e)

    def rhs(self):
        return make_rhs(self.raw["f"], self.d)

    def validate(self):
        errors = []
        r = self.raw
        unknown = set(r) - set(DEFAULTS) - {"fit"}
        if unknown:
            errors.append(f"unknown keys {sorted(unknown)}")
        try:
            d = int(r["d"])
            if d not in (1, 2, 3):
                errors.append(f"d must be 1, 2 or 3, got {d}")
        except (TypeError, ValueError):
            errors.append(f"d must be an integer, got {r['d']!r}")
            d = None
        domain = None
        if d in (1, 2, 3):
            try:
                domain = self.domain
                if domain.d != d:
                    errors.append(f"domain has {domain.d} axes but d={d}")
                    domain = None
            except (TypeError, ValueError) as exc:
                errors.append(f"domain: {exc}")
        try:
            ns = self.n_coarse
            if not ns or any(n < 1 for n in ns):
                errors.append("n_coarse must be a non-empty list of positive integers")
        except (TypeError, ValueError):
            errors.append(f"n_coarse must be integers, got {r['n_coarse']!r}")
            ns = []
        try:
            eps = self.eps_list
            if not eps or any(e <= 0 for e in eps):
                errors.append("field.eps must be a non-empty list of positive numbers")
        except (TypeError, ValueError, ZeroDivisionError):
            errors.append(f"field.eps must be numbers, got {r['field'].get('eps')!r}")
            eps = []
        try:
            self.field_spec(1.0)
        except (TypeError, ValueError, KeyError) as exc:
            errors.append(f"field: {exc}")
        if r["ell"] != "auto" and not (isinstance(r["ell"], int) and r["ell"] >= 1):
            errors.append(f"ell must be 'auto' or a positive integer, got {r['ell']!r}")
        if r["refine"] != "auto" and not (isinstance(r["refine"], int) and r["refine"] >= 0):
            errors.append(f"refine must be 'auto' or a nonnegative integer, got {r['refine']!r}")
        if not isinstance(r["n_samples"], int) or r["n_samples"] < 1:
            errors.append(f"n_samples must be a positive integer, got {r['n_samples']!r}")
        if not isinstance(r["master_seed"], int) or not 0 <= r["master_seed"] < 2**64:
            errors.append(f"master_seed must be an unsigned 64 bit integer, got {r['master_seed']!r}")
        if not isinstance(r["workers"], int) or r["workers"] < 1:
            errors.append(f"workers must be a positive integer, got {r['workers']!r}")
        if r["mode"] not in MODES:
            errors.append(f"mode must be one of {MODES}, got {r['mode']!r}")
        if d in (1, 2, 3):
            try:
                make_rhs(r["f"], d)
            except (ValueError, SyntaxError, NameError, TypeError) as exc:
                errors.append(f"f: {exc}")
        if domain is not None:
            for n in (n for n in ns if n >= 1):
                for e in eps:
                    if e > domain.lengths.min() / 4:
                        errors.append(f"eps={e} exceeds a quarter of the smallest domain extent")
                    spacing = (domain.lengths / n).max()
                    if r["refine"] != "auto" and isinstance(r["refine"], int):
                        h = spacing / 2 ** r["refine"]
                        if h > e / float(r["h_ratio"]) * (1 + 1e-12):
                            errors.append(f"(n={n}, eps={e}): fine spacing {h} violates h <= eps/{r['h_ratio']}")
        if errors:
            raise ConfigError(errors)

    def resolved(self) -> dict:
        out = copy.deepcopy(self.raw)
        out["domain"] = [list(e) for e in self.domain.extents]
        out["n_coarse"] = self.n_coarse
        out["field"]["eps"] = self.eps_list
        return out

    def hash(self) -> str:
        data = {k: v for k, v in self.resolved().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


_RHS_NAMES = {name: getattr(np, name) for name in ("sin", "cos", "exp", "sqrt", "abs", "log", "tanh", "where")}
_RHS_NAMES["pi"] = np.pi


class ExpressionRhs:
    """Right-hand side given as an expression in ``x``, ``y``, ``z``."""

    def __init__(self, expr: str, d: int):
        self.description = expr
        self._code = compile(expr, "<f>", "eval")
        allowed = set(_RHS_NAMES) | {"x", "y", "z"}
        bad = set(self._code.co_names) - allowed
        if bad:
            raise NameError(f"unknown names {sorted(bad)} in {expr!r}")
        self.d = d
        self(np.zeros((2, d)))

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        env = dict(_RHS_NAMES)
        for i, name in enumerate("xyz"[: pts.shape[1]]):
            env[name] = pts[:, i]
        return np.broadcast_to(eval(self._code, {"__builtins__": {}}, env), (pts.shape[0],))

    def __mul__(self, c):
        return ExpressionRhs(f"({c!r}) * ({self.description})", self.d)

    __rmul__ = __mul__


def make_rhs(spec, d: int):
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return float(spec)
    if isinstance(spec, str):
        try:
            return float(spec)
        except ValueError:
            return ExpressionRhs(spec, d)
    raise TypeError(f"f must be a number or an expression string, got {spec!r}")


@dataclass
class StudyTable:
    rows: list[dict]
    config_hash: str = ""
    fits: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version: {SCHEMA_VERSION}\n")
        buf.write(f"# config_hash: {self.config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "StudyTable":
        lines = text.splitlines()
        meta = {}
        body = []
        for line in lines:
            if line.startswith("#"):
                k, _, v = line[1:].partition(":")
                meta[k.strip()] = v.strip()
            elif line.strip():
                body.append(line)
        if int(meta.get("schema_version", -1)) != SCHEMA_VERSION:
            raise ValueError("unsupported study table schema")
        reader = csv.DictReader(body)
        rows = []
        for r in reader:
            rows.append({c: (int(r[c]) if c in ("d", "ell", "N") else float(r[c])) for c in COLUMNS})
        return cls(rows, meta.get("config_hash", ""))

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, "config_hash": self.config_hash,
                           "rows": self.rows, "fits": self.fits}, indent=1)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _cell_name(n: int, eps: float) -> str:
    return f"cell_n{n}_eps{eps!r}.json"


def run_cell(cfg: ExperimentConfig, n: int, eps: float, workers: int | None = None) -> dict:
    """Offline and online phase for one (H, eps) pair; returns a table row."""
    workers = cfg.workers if workers is None else workers
    coarse, fine = cfg.meshes(n, eps)
    ell = cfg.ell(coarse)
    spec = cfg.field_spec(eps)
    f = cfg.rhs()
    t0 = time.perf_counter()
    batch = run_batch(spec, coarse, fine, ell, cfg.n_samples, cfg.master_seed, workers)
    averaged = average_kernels(batch)
    t1 = time.perf_counter()
    sol = solve_coarse(averaged, f)
    err = expected_l2_error(batch, averaged, f, sol, workers)
    t2 = time.perf_counter()
    gam = estimate_gamma(batch, averaged)
    record = cfg.raw["record_timings"]
    return {
        "d": cfg.d, "H": coarse.H, "eps": eps, "ell": ell, "N": cfg.n_samples,
        "rmse": err.rmse, "rmse_se": err.rmse_se, "gamma": gam.gamma, "gamma_se": gam.gamma_se,
        # unrecorded wall times are nan so that reruns give identical tables
        "t_offline_s": (t1 - t0) if record else math.nan,
        "t_online_s": (t2 - t1) if record else math.nan,
    }


class ResumeError(ConfigError):
    pass


def run_study(cfg: ExperimentConfig, workers: int | None = None) -> StudyTable:
    """Every (n_coarse, eps) pair of the config, resumable per cell.

    Writes ``study.csv``, ``study.json`` and ``resolved_config.yaml`` to
    ``cfg.out``; finished cells are kept under ``cells/`` and reused when
    the config hash matches.
    """
    out = cfg.out
    cells = out / "cells"
    cells.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.resolved(), sort_keys=True))
    rows = []
    for n in cfg.n_coarse:
        for eps in cfg.eps_list:
            marker = cells / _cell_name(n, eps)
            if marker.exists():
                done = json.loads(marker.read_text())
                if done.get("config_hash") != chash:
                    raise ResumeError(f"{marker} was written by config {done.get('config_hash')}, current is {chash}")
                log.info("reusing %s", marker.name)
                rows.append(done["row"])
                continue
            log.info("cell n=%d eps=%g", n, eps)
            row = run_cell(cfg, n, eps, workers)
            marker.write_text(json.dumps({"config_hash": chash, "row": row}))
            rows.append(row)
    table = StudyTable(rows, chash)
    fit = cfg.raw.get("fit")
    if fit:
        try:
            fixed = None if fit.get("fixed") is None else _number(fit["fixed"])
            x_range = None if fit.get("range") is None else tuple(_number(v) for v in fit["range"])
            rf = fit_rates(table, fit.get("regime", "H"), fit.get("quantity"), fixed, x_range)
            table.fits[f"{rf.x}->{rf.y}"] = rf.as_dict()
        except ValueError as exc:
            log.warning("rate fit skipped: %s", exc)
    (out / "study.csv").write_text(table.to_csv())
    (out / "study.json").write_text(table.to_json())
    return table


@dataclass
class RateFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_rows: int
    x: str
    y: str

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def __str__(self):
        half = 0.5 * (self.ci_high - self.ci_low)
        return f"{self.y} ~ {self.x}^{self.slope:.3f} +/- {half:.3f} ({self.n_rows} rows)"


def loglog_fit(x, y, n_boot: int = 2000, seed: int = 0, level: float = 0.95) -> tuple[float, float, float, float]:
    """OLS slope of ``log y`` on ``log x`` with a residual-bootstrap interval."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if lx.size < 3:
        raise ValueError("need at least 3 rows for a rate fit")
    slope, intercept = np.polyfit(lx, ly, 1)
    fitted = slope * lx + intercept
    res = ly - fitted
    rng = np.random.default_rng(seed)
    boot = np.array([np.polyfit(lx, fitted + rng.choice(res, res.size), 1)[0] for _ in range(n_boot)])
    a = (1 - level) / 2
    lo, hi = np.quantile(boot, [a, 1 - a])
    return float(slope), float(intercept), float(min(lo, slope)), float(max(hi, slope))


def fit_rates(table: StudyTable, regime: str, quantity: str | None = None, fixed: float | None = None,
              x_range=None) -> RateFit:
    """Log-log slope over the in-regime rows of ``table``.

    ``regime="H"`` fits against ``H`` among rows sharing one ``eps``
    (default quantity ``rmse``); ``regime="eps"`` fits against ``eps`` among
    rows sharing one ``H`` (default quantity ``gamma``).  ``fixed`` selects the
    shared value, otherwise the largest group is used; ``x_range`` restricts
    the fitted abscissae.
    """
    aliases = {"H": "H", "H-dominated": "H", "eps": "eps", "eps-dominated": "eps"}
    if regime not in aliases:
        raise ValueError(f"unknown regime {regime!r}")
    x = aliases[regime]
    other = "eps" if x == "H" else "H"
    y = quantity or ("rmse" if x == "H" else "gamma")
    groups: dict = {}
    for row in table.rows:
        groups.setdefault(row[other], []).append(row)
    if fixed is not None:
        key = min(groups, key=lambda k: abs(k - fixed))
    else:
        key = max(groups, key=lambda k: len(groups[k]))
    rows = groups[key]
    if x_range is not None:
        rows = [r for r in rows if x_range[0] <= r[x] <= x_range[1]]
    if len(rows) < 3:
        raise ValueError(f"need at least 3 in-regime rows, have {len(rows)}")
    slope, intercept, lo, hi = loglog_fit([r[x] for r in rows], [r[y] for r in rows])
    return RateFit(slope, intercept, lo, hi, len(rows), x, y)
