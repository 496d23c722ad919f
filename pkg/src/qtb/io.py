"""CSV ingestion, analysis configuration and result serialization."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io as _stdio
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .estimation import TwoSampleData

log = logging.getLogger(__name__)

FORMAT_VERSION = "1.0"
SIG_DIGITS = 12
_MISSING = {"", "na", "nan", "null", "none", "."}


class SchemaError(ValueError):
    """CSV header or schema file does not match the expected layout."""


class MissingFieldError(SchemaError):
    """Required values are missing; ``rows`` lists 1-based file line numbers."""

    def __init__(self, message: str, rows=()):
        self.rows = list(rows)
        if self.rows:
            shown = ", ".join(map(str, self.rows[:20]))
            more = f" (+{len(self.rows) - 20} more)" if len(self.rows) > 20 else ""
            message = f"{message}; lines {shown}{more}"
        super().__init__(message)


class ConfigKeyError(ValueError):
    """Unknown or invalid configuration entry."""


# ---------------------------------------------------------------------------
# schema and ingestion


@dataclass
class Schema:
    r: str = "r"
    a: str = "a"
    y: str = "y"
    covariates: Optional[list] = None  # None: every other column
    categorical: list = field(default_factory=list)
    bins: int = 4

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        s = cls(**d)
        if not isinstance(s.bins, int) or s.bins < 1:
            raise SchemaError("bins must be a positive integer")
        return s

    @classmethod
    def load(cls, path) -> "Schema":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema file {path} is not valid JSON: {exc}") from exc


@dataclass
class CellCoding:
    """How raw covariate values were mapped to integer cell ids."""

    covariates: list
    levels: dict  # categorical column -> sorted level list
    edges: dict  # numeric column -> interior bin edges
    cells: list  # cell id -> tuple of per-covariate codes

    def to_dict(self) -> dict:
        return {"covariates": self.covariates, "levels": self.levels,
                "edges": {k: [_round_sig(v) for v in e] for k, e in self.edges.items()},
                "cells": [list(c) for c in self.cells]}


def quantile_edges(values, bins: int) -> np.ndarray:
    """Interior bin edges at the pooled ``k / bins`` quantiles (duplicates dropped)."""
    v = np.asarray(values, float)
    if bins <= 1 or v.size == 0:
        return np.empty(0)
    return np.unique(np.quantile(v, np.arange(1, bins) / bins))


def bin_codes(values, edges) -> np.ndarray:
    """Right-closed bins: value ``v`` goes to the number of edges strictly below it."""
    return np.searchsorted(np.asarray(edges, float), np.asarray(values, float), side="left")


def _is_missing(v: Optional[str]) -> bool:
    return v is None or v.strip().lower() in _MISSING


def _parse_int01(v: str, what: str, line: int) -> int:
    try:
        f = float(v)
    except ValueError as exc:
        raise SchemaError(f"line {line}: {what} value {v!r} is not numeric") from exc
    if f not in (0.0, 1.0):
        raise SchemaError(f"line {line}: {what} must be 0 or 1, got {v!r}")
    return int(f)


def ingest_csv(path, schema: Optional[Schema] = None, return_coding: bool = False):
    """Read a pooled source/target CSV into :class:`TwoSampleData`.

    Categorical covariates keep their levels; numeric ones are cut into
    ``schema.bins`` quantile bins over the pooled sample.  Cells are the
    observed combinations of covariate codes.  Target rows may carry
    treatment and outcome values; they are masked with a warning.
    """
    schema = schema or Schema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SchemaError(f"{path}: empty file or missing header row")
        rows = list(reader)
    header = [h.strip() for h in header]
    for col in (schema.r, schema.a, schema.y):
        if col not in header:
            raise SchemaError(f"{path}: required column {col!r} not in header {header}")
    covs = schema.covariates if schema.covariates is not None else \
        [h for h in header if h not in (schema.r, schema.a, schema.y)]
    missing_cols = [c for c in list(covs) + list(schema.categorical) if c not in header]
    if missing_cols:
        raise SchemaError(f"{path}: covariate columns {missing_cols} not in header")
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    bad_r, bad_src, bad_cov, masked = [], [], [], []
    r = np.empty(len(rows), np.int64)
    a = np.full(len(rows), -1, np.int64)
    y = np.full(len(rows), np.nan)
    for i, row in enumerate(rows):
        line = i + 2
        row = {k.strip() if k else k: v for k, v in row.items()}
        if _is_missing(row.get(schema.r)):
            bad_r.append(line)
            continue
        r[i] = _parse_int01(row[schema.r], "r", line)
        if any(_is_missing(row.get(c)) for c in covs):
            bad_cov.append(line)
        has_a, has_y = not _is_missing(row.get(schema.a)), not _is_missing(row.get(schema.y))
        if r[i] == 1:
            if not (has_a and has_y):
                bad_src.append(line)
                continue
            a[i] = _parse_int01(row[schema.a], "a", line)
            try:
                y[i] = float(row[schema.y])
            except ValueError as exc:
                raise SchemaError(f"line {line}: outcome {row[schema.y]!r} is not numeric") from exc
            if not math.isfinite(y[i]):
                bad_src.append(line)
        elif has_a or has_y:
            masked.append(line)
        rows[i] = row
    if bad_r:
        raise MissingFieldError(f"missing sample indicator {schema.r!r}", bad_r)
    if bad_src:
        raise MissingFieldError("source rows need treatment and outcome", bad_src)
    if bad_cov:
        raise MissingFieldError("missing covariate values", bad_cov)
    if masked:
        log.warning("%d target rows carry treatment/outcome values; they are ignored (first line %d)",
                    len(masked), masked[0])

    codes, levels, edges = [], {}, {}
    for c in covs:
        raw = [row[c].strip() for row in rows]
        if c in schema.categorical:
            lv = sorted(set(raw))
            levels[c] = lv
            lookup = {v: k for k, v in enumerate(lv)}
            codes.append(np.array([lookup[v] for v in raw], np.int64))
            continue
        try:
            vals = np.array([float(v) for v in raw])
        except ValueError as exc:
            raise SchemaError(f"covariate {c!r} is not numeric; list it under 'categorical'") from exc
        e = quantile_edges(vals, schema.bins)
        edges[c] = e.tolist()
        codes.append(bin_codes(vals, e))
    if codes:
        combo = np.stack(codes, axis=1)
        uniq, x = np.unique(combo, axis=0, return_inverse=True)
        x = x.ravel()
        cells = [tuple(int(v) for v in u) for u in uniq]
    else:
        x = np.zeros(len(rows), np.int64)
        cells = [()]
    data = TwoSampleData(r, x, a, y, len(cells))
    if return_coding:
        return data, CellCoding(list(covs), levels, edges, cells)
    return data


def load_propensity_table(path, n_cells: int) -> np.ndarray:
    """Known treatment probabilities from a CSV with columns ``cell`` and ``e1``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"cell", "e1"} <= set(reader.fieldnames):
            raise SchemaError(f"{path}: propensity table needs columns 'cell' and 'e1'")
        table = {int(row["cell"]): float(row["e1"]) for row in reader}
    missing = [j for j in range(n_cells) if j not in table]
    if missing:
        raise SchemaError(f"{path}: no propensity for cells {missing}")
    e1 = np.array([table[j] for j in range(n_cells)])
    if np.any((e1 <= 0) | (e1 >= 1)):
        raise SchemaError("known propensities must lie in (0, 1)")
    return e1


# ---------------------------------------------------------------------------
# analysis configuration


@dataclass
class AnalysisConfig:
    """Validated settings shared by the ``bounds``, ``estimate`` and ``frontier`` commands.

    ``sensitivity`` is a list of ``[gamma, lambda]`` pairs; ``s_rect`` and
    ``mesh`` define the frontier scan.
    """

    sensitivity: list = field(default_factory=lambda: [[1.0, 1.0]])
    s_rect: list = field(default_factory=lambda: [1.0, 4.0, 1.0, 3.0])
    mesh: list = field(default_factory=lambda: [31, 31])
    taus: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    tau0: float = 0.5
    alpha: float = 0.05
    folds: int = 5
    eta: float = 0.05
    grid_size: int = 181
    grid_placement: str = "uniform"
    design: str = "observational"
    e_table: Optional[str] = None
    variant: str = "full"
    inference: str = "multiplier"
    n_draws: int = 199
    subsample_exponent: float = 0.6
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigKeyError(f"unknown configuration keys: {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "AnalysisConfig":
        text = Path(path).read_text(encoding="utf-8")
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
        return cls.from_dict(d)

    def validate(self) -> None:
        def bad(msg):
            raise ConfigKeyError(msg)
        pairs = np.asarray(self.sensitivity, float)
        if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] < 1:
            bad("sensitivity must be a nonempty list of [gamma, lambda] pairs")
        if np.any(pairs < 1.0) or not np.all(np.isfinite(pairs)):
            bad("sensitivity parameters must be finite and >= 1")
        if len(self.s_rect) != 4 or not (1.0 <= self.s_rect[0] < self.s_rect[1]) \
                or not (1.0 <= self.s_rect[2] < self.s_rect[3]):
            bad("s_rect must be [gamma_lo, gamma_hi, lambda_lo, lambda_hi] with 1 <= lo < hi")
        if len(self.mesh) != 2 or min(self.mesh) < 2:
            bad("mesh needs two sizes >= 2")
        if not self.taus or any(not 0.0 < t < 1.0 for t in self.taus):
            bad("taus must lie in (0, 1)")
        if not 0.0 < self.tau0 < 1.0:
            bad("tau0 must lie in (0, 1)")
        if not 0.0 < self.alpha < 1.0:
            bad("alpha must lie in (0, 1)")
        if self.folds < 2:
            bad("folds must be >= 2")
        if not 0.0 <= self.eta < 0.5:
            bad("eta must lie in [0, 0.5)")
        if self.grid_size < 2:
            bad("grid_size must be >= 2")
        if self.grid_placement not in ("uniform", "observed"):
            bad("grid_placement must be 'uniform' or 'observed'")
        if self.design not in ("observational", "known"):
            bad("design must be 'observational' or 'known'")
        if self.design == "known" and not self.e_table:
            bad("design 'known' needs e_table")
        if self.variant not in ("full", "plugin", "noge", "point"):
            bad("variant must be one of full, plugin, noge, point")
        if self.inference not in ("multiplier", "subsample"):
            bad("inference must be 'multiplier' or 'subsample'")
        if self.n_draws < 99:
            bad("n_draws must be >= 99")
        if not 0.0 < self.subsample_exponent < 1.0:
            bad("subsample_exponent must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# result bundle


def _round_sig(v: float) -> Optional[float]:
    v = float(v)
    if not math.isfinite(v):
        return None
    return float(f"{v:.{SIG_DIGITS}g}")


def encode(obj):
    if isinstance(obj, np.ndarray):
        if obj.dtype == bool:
            return {"__array__": obj.astype(int).tolist(), "dtype": "bool", "shape": list(obj.shape)}
        flat = [_round_sig(v) for v in obj.astype(float).ravel()]
        return {"__array__": flat, "dtype": "float", "shape": list(obj.shape)}
    if isinstance(obj, (float, np.floating)):
        return _round_sig(obj)
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [encode(v) for v in obj]
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            shape = tuple(obj["shape"])
            if obj["dtype"] == "bool":
                return np.array(obj["__array__"], dtype=bool).reshape(shape)
            vals = [np.nan if v is None else v for v in obj["__array__"]]
            return np.array(vals, dtype=float).reshape(shape)
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def _fmt_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(float(v)) else f"{float(v):.{SIG_DIGITS}g}"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


@dataclass
class ResultBundle:
    """Everything one analysis run produced, plus traceability metadata.

    ``arrays`` holds numeric grids (``psi``, ``phi``, band limits, frontier
    fields); ``tables`` holds row-oriented results (quantile intervals,
    hulls).  Floats are stored with 12 significant digits.
    """

    command: str
    arrays: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION

    def to_json(self) -> str:
        payload = {"format_version": self.format_version, "command": self.command,
                   "metadata": encode(self.metadata), "tables": encode(self.tables),
                   "arrays": encode(self.arrays)}
        return json.dumps(payload, indent=1, sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "ResultBundle":
        d = json.loads(text)
        if "format_version" not in d:
            raise SchemaError("result file has no format_version")
        if d["format_version"].split(".")[0] != FORMAT_VERSION.split(".")[0]:
            raise SchemaError(f"unsupported format_version {d['format_version']}")
        return cls(d["command"], _decode(d["arrays"]), _decode(d["tables"]), _decode(d["metadata"]),
                   d["format_version"])

    def save(self, out_dir) -> list[Path]:
        """Write ``result.json`` and one CSV per table into ``out_dir``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "result.json"]
        _write_exclusive(written[0], self.to_json())
        for name, rows in self.tables.items():
            p = out / f"{name}.csv"
            _write_exclusive(p, table_csv(rows))
            written.append(p)
        return written

    @classmethod
    def load(cls, path) -> "ResultBundle":
        p = Path(path)
        if p.is_dir():
            p = p / "result.json"
        return cls.from_json(p.read_text(encoding="utf-8"))


def table_csv(rows: list) -> str:
    keys: list = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    buf = _stdio.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt_cell(r.get(k, "")) for k in keys})
    return buf.getvalue()


def _write_exclusive(path: Path, text: str) -> None:
    # write to a sibling temp file, then rename so readers never see partial output
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "x", encoding="utf-8", newline="") as fh:
        fh.write(text)
    tmp.replace(path)
