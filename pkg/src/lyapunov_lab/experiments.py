"""Config-driven sweeps over (d, eps, estimator) and their CSV/JSON output."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .ensembles import CocycleSpec, RngStream, rotation, stable_stream_index
from .estimators import (
    asymptotic_spectrum,
    estimate_approx_mc,
    estimate_direct,
    estimate_exact_mc,
    simulate_sigma_chain,
)

log = logging.getLogger(__name__)

ESTIMATORS = ("direct", "exact", "approx", "asymptotic", "sigma")
FORMATS = ("csv", "json")
RESULT_FIELDS = ("d", "epsilon", "k", "estimator", "lambda_hat", "std_err",
                 "n_units", "master_seed", "wall_time_seconds")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    """A sweep over dims x epsilons x estimators.

    ``base`` picks the base sequence for the direct estimator (``identity``,
    ``haar``, ``rotation:<angle>`` for d = 2).  ``record_timing`` fills in
    ``wall_time_seconds``; leave it off for byte-reproducible output.
    """

    dims: list
    epsilons: list
    estimators: list
    n_samples: int
    master_seed: int
    n_steps: Optional[int] = None
    reorth_period: int = 1
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    output_path: Optional[str] = None
    output_format: str = "csv"
    base: str = "haar"
    antithetic: bool = False
    record_timing: bool = False

    def __post_init__(self):
        if self.n_steps is None:
            self.n_steps = self.n_samples
        self.validate()

    def validate(self):
        def int_list(name, lo):
            v = getattr(self, name)
            if not isinstance(v, list) or not v:
                raise ConfigError(name, "must be a non-empty list")
            if not all(_is_int(x) and x >= lo for x in v):
                raise ConfigError(name, f"entries must be integers >= {lo}")

        int_list("dims", 1)
        if not isinstance(self.epsilons, list) or not self.epsilons:
            raise ConfigError("epsilons", "must be a non-empty list")
        for e in self.epsilons:
            if not _is_number(e) or not math.isfinite(e) or e <= 0:
                raise ConfigError("epsilons", f"entries must be positive finite numbers, got {e!r}")
        if not isinstance(self.estimators, list) or not self.estimators:
            raise ConfigError("estimators", "must be a non-empty list")
        for name in self.estimators:
            if name not in ESTIMATORS:
                raise ConfigError("estimators", f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimators", "duplicate estimator")
        for name in ("n_samples", "n_steps", "reorth_period", "workers"):
            v = getattr(self, name)
            if not _is_int(v) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if not _is_int(self.master_seed) or not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed", "must be a 64-bit unsigned integer")
        if self.output_format not in FORMATS:
            raise ConfigError("output_format", f"must be one of {FORMATS}")
        if self.output_path is not None and not isinstance(self.output_path, str):
            raise ConfigError("output_path", "must be a string")
        if not isinstance(self.base, str):
            raise ConfigError("base", "must be a string")
        try:
            for d in self.dims if "direct" in self.estimators else ():
                base_spec(self.base, d, 0.1)
        except ValueError as exc:
            raise ConfigError("base", str(exc)) from None
        for name in ("antithetic", "record_timing"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(name, "must be true or false")


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def config_from_mapping(data: dict, overrides: Optional[dict] = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<document>", "config must be a key-value object")
    merged = {**data, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    known = {f.name for f in fields(ExperimentConfig)}
    for key in merged:
        if key not in known:
            raise ConfigError(key, "unknown field")
    for key in ("dims", "epsilons", "estimators", "n_samples", "master_seed"):
        if key not in merged:
            raise ConfigError(key, "required field missing")
    return ExperimentConfig(**merged)


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse a JSON key-value document into a validated :class:`ExperimentConfig`.

    ``overrides`` (e.g. from command-line flags) replace file values; ``None``
    entries are ignored.
    """
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"not valid JSON: {exc}") from None
    return config_from_mapping(data, overrides)


def base_spec(base: str, d: int, epsilon: float) -> CocycleSpec:
    """Cocycle spec from a short base description.

    ``identity``, ``haar``, ``rotation:<angle>`` (d = 2) or
    ``diag:<a>,<b>,...`` (constant diagonal, not necessarily orthogonal).
    """
    kind, _, arg = base.partition(":")
    if kind == "identity":
        return CocycleSpec.identity(d, epsilon)
    if kind == "haar":
        return CocycleSpec.haar(d, epsilon)
    if kind == "rotation":
        if d != 2:
            raise ValueError("rotation base needs d = 2")
        return CocycleSpec.fixed(rotation(float(arg or 0.0)), epsilon)
    if kind == "diag":
        vals = [float(x) for x in arg.split(",") if x]
        if len(vals) != d:
            raise ValueError(f"diag base needs {d} entries")
        return CocycleSpec.constant(np.diag(vals), epsilon)
    raise ValueError(f"unknown base {base!r}")


@dataclass
class ResultRow:
    d: int
    epsilon: float
    k: int
    estimator: str
    lambda_hat: float
    std_err: float
    n_units: int
    master_seed: int
    wall_time_seconds: float
    error: Optional[str] = field(default=None, compare=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


def cell_stream(master_seed: int, d: int, epsilon: float, estimator: str, replicate: int = 0) -> RngStream:
    """Stream for one sweep cell, keyed by a stable hash of the cell itself."""
    return RngStream(master_seed, stable_stream_index(int(d), float(epsilon), estimator, replicate))


def _run_estimator(cfg: ExperimentConfig, d, eps, name, rng):
    if name == "asymptotic":
        return asymptotic_spectrum(d, eps)
    if name == "exact":
        return estimate_exact_mc(d, eps, cfg.n_samples, rng, antithetic=cfg.antithetic)
    if name == "approx":
        return estimate_approx_mc(d, eps, cfg.n_samples, rng, antithetic=cfg.antithetic)
    if name == "direct":
        return estimate_direct(base_spec(cfg.base, d, eps), cfg.n_steps, cfg.reorth_period, rng)
    return simulate_sigma_chain(d, eps, cfg.n_steps, rng).estimate


def run_cell(cfg: ExperimentConfig, d: int, eps: float, name: str) -> list:
    """Rows k = 1..d for one cell; failures become rows with NaN values."""
    start = time.perf_counter()
    try:
        est = _run_estimator(cfg, d, eps, name, cell_stream(cfg.master_seed, d, eps, name))
    except Exception as exc:  # one bad cell must not sink the sweep
        log.warning("cell d=%s eps=%s %s failed: %s", d, eps, name, exc)
        return [ResultRow(d, eps, k, name, math.nan, math.nan, 0, cfg.master_seed, 0.0,
                          error=f"{type(exc).__name__}: {exc}") for k in range(1, d + 1)]
    wall = time.perf_counter() - start if cfg.record_timing else 0.0
    return [ResultRow(d, eps, k + 1, name, float(est.lambdas[k]), float(est.std_errs[k]),
                      int(est.n_units), cfg.master_seed, wall) for k in range(d)]


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(config: ExperimentConfig) -> list:
    """Run every (d, eps, estimator) cell and return rows sorted by (d, eps, estimator, k).

    Cells run on a process pool of ``config.workers``; each cell draws from
    its own hashed stream, so neither the worker count nor the cell order
    changes any number.
    """
    cells = [(config, int(d), float(e), name)
             for d, e, name in itertools.product(config.dims, config.epsilons, config.estimators)]
    if config.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, len(cells))) as pool:
            parts = list(pool.map(_run_cell_args, cells))
    else:
        parts = [run_cell(*c) for c in cells]
    rows = [r for part in parts for r in part]
    rows.sort(key=lambda r: (r.d, r.epsilon, r.estimator, r.k))
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def format_csv(rows, columns=RESULT_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for r in rows:
        rec = r if isinstance(r, dict) else asdict(r)
        writer.writerow([_fmt(rec[c]) for c in columns])
    return buf.getvalue()


def format_json(rows, columns=RESULT_FIELDS) -> str:
    out = []
    for r in rows:
        rec = r if isinstance(r, dict) else asdict(r)
        out.append({c: (None if isinstance(rec[c], float) and math.isnan(rec[c]) else rec[c])
                    for c in columns})
    return json.dumps(out, indent=1, allow_nan=False) + "\n"


def emit_results(rows, fmt: str = "csv", path: Optional[str] = None, columns=RESULT_FIELDS) -> str:
    """Serialise rows and write them to ``path`` (if given); returns the text.

    CSV floats carry 17 significant digits so every value round-trips
    exactly.  Unwritable paths raise ``OSError``.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to emit")
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    text = format_csv(rows, columns) if fmt == "csv" else format_json(rows, columns)
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    return text


_INT_FIELDS = {"d", "k", "n_units", "master_seed"}
_STR_FIELDS = {"estimator"}


def parse_results(text: str, fmt: str = "csv") -> list:
    """Inverse of :func:`emit_results` for result rows."""
    if fmt == "json":
        recs = json.loads(text)
    else:
        recs = list(csv.DictReader(io.StringIO(text, newline="")))

    def conv(name, v):
        if name in _INT_FIELDS:
            return int(v)
        if name in _STR_FIELDS:
            return str(v)
        return math.nan if v is None else float(v)

    return [ResultRow(**{c: conv(c, rec[c]) for c in RESULT_FIELDS}) for rec in recs]


class MissingPairError(ValueError):
    pass


@dataclass(frozen=True)
class ResidualRow:
    d: int
    epsilon: float
    k: int
    estimator: str
    residual: float
    std_err: float
    bound: float


RESIDUAL_FIELDS = tuple(f.name for f in fields(ResidualRow))


def residual_bound(epsilon: float) -> float:
    return epsilon**4 * abs(math.log(epsilon)) ** 4


def residual_table(rows) -> list:
    """Residuals ``lambda_hat - (d - 2k) eps^2 / 2`` for plotting against eps^4 |log eps|^4.

    Every (d, eps, k) that has an estimate must also have an asymptotic row.
    Groups holding only the asymptotic row yield that row's own (zero)
    residual.  Failed rows are skipped.
    """
    groups: dict = {}
    for r in rows:
        if not r.failed and not math.isnan(r.lambda_hat):
            groups.setdefault((r.d, r.epsilon, r.k), []).append(r)
    out = []
    for (d, eps, k), members in sorted(groups.items()):
        asym = [m for m in members if m.estimator == "asymptotic"]
        if not asym:
            raise MissingPairError(f"no asymptotic row for d={d}, eps={eps}, k={k}")
        leading = (d - 2 * k) * eps**2 / 2
        measured = [m for m in members if m.estimator != "asymptotic"] or asym
        for m in measured:
            out.append(ResidualRow(d, eps, k, m.estimator, m.lambda_hat - leading,
                                   m.std_err, residual_bound(eps)))
    return out
