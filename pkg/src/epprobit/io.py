"""File formats used by the command line tool.

Datasets are long-format CSV with one row per displayed alternative::

    obs_id,alt_id,chosen,cov_1,...,cov_p

``alt_id`` is the 1-based display position and must run 1..k within an
observation.  For the outside-option kind an observation with no chosen row
picked the outside option.

Estimates are a single JSON document described by
``schemas/estimates.schema.json``; floats are written with Python's
shortest round-trip representation so that reading them back is lossless.
Iteration traces are newline-delimited JSON, one record per EM iteration.
"""

from __future__ import annotations

import csv
import json
import re
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import InvalidOutcome, ProbitError
from .model import MULTIVARIATE, OUTSIDE, ChoiceObservation, ModelKind, ProbitModel

__all__ = [
    "DataFormatError",
    "read_long_csv",
    "write_long_csv",
    "estimates_document",
    "write_estimates",
    "read_estimates",
    "estimates_schema",
    "TraceWriter",
    "iter_trace",
]

_COV = re.compile(r"^cov_(\d+)$")
SCHEMA_VERSION = 1


class DataFormatError(ProbitError, ValueError):
    """Malformed dataset; the message names the offending line and column."""


def _fail(line: int, column: str, msg: str):
    raise DataFormatError(f"line {line}, column {column!r}: {msg}")


def read_long_csv(path, kind: ModelKind, require_outcome: bool = True) -> Tuple[List[ChoiceObservation], List[str]]:
    """Read a long-format dataset.

    Parameters
    ----------
    path : path-like
    kind : ModelKind
        Determines how the ``chosen`` column is interpreted and validated.
    require_outcome : bool
        Validate the number of chosen rows per observation.  Prediction
        inputs may leave ``chosen`` at zero.

    Returns
    -------
    observations : list of ChoiceObservation
        In order of first appearance of each ``obs_id``.  ``positions`` is
        set when choice-set sizes differ.
    obs_ids : list of str
    """
    try:
        df = pd.read_csv(path, dtype={"obs_id": str}, keep_default_na=False, skipinitialspace=True,
                         float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataFormatError("no observations") from None
    if df.shape[0] == 0:
        raise DataFormatError("no observations")
    for col in ("obs_id", "alt_id", "chosen"):
        if col not in df.columns:
            raise DataFormatError(f"missing required column {col!r}")
    cov_cols = sorted((c for c in df.columns if _COV.match(str(c))), key=lambda c: int(_COV.match(c).group(1)))
    if not cov_cols:
        raise DataFormatError("no covariate columns (expected cov_1, cov_2, ...)")
    expected = [f"cov_{k}" for k in range(1, len(cov_cols) + 1)]
    if cov_cols != expected:
        raise DataFormatError(f"covariate columns must be cov_1..cov_{len(cov_cols)}, got {cov_cols}")

    lines = np.arange(df.shape[0]) + 2  # header is line 1
    numeric = {}
    for col in ["alt_id", "chosen"] + cov_cols:
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = np.flatnonzero(vals.isna().to_numpy() | ~np.isfinite(vals.to_numpy(dtype=float)))
        if bad.size:
            _fail(int(lines[bad[0]]), col, f"expected a finite number, got {df[col].iloc[bad[0]]!r}")
        numeric[col] = vals.to_numpy(dtype=float)
    alt = numeric["alt_id"]
    chosen = numeric["chosen"]
    for col, arr in (("alt_id", alt), ("chosen", chosen)):
        bad = np.flatnonzero(arr != np.round(arr))
        if bad.size:
            _fail(int(lines[bad[0]]), col, f"expected an integer, got {df[col].iloc[bad[0]]!r}")
    bad = np.flatnonzero(~np.isin(chosen, (0, 1)))
    if bad.size:
        _fail(int(lines[bad[0]]), "chosen", f"expected 0 or 1, got {df['chosen'].iloc[bad[0]]!r}")
    x_all = np.column_stack([numeric[c] for c in cov_cols])

    obs_ids = df["obs_id"].astype(str).to_numpy()
    order, first = np.unique(obs_ids, return_index=True)
    order = order[np.argsort(first)]
    rows_of = df.groupby(obs_ids, sort=False).indices

    observations = []
    sizes = []
    for oid in order:
        rows = np.asarray(rows_of[oid])
        rows = rows[np.argsort(alt[rows], kind="stable")]
        a = alt[rows].astype(int)
        if not np.array_equal(a, np.arange(1, a.size + 1)):
            _fail(int(lines[rows[0]]), "alt_id",
                  f"obs_id {oid!r} has alt_id {a.tolist()}; positions must run 1..k without gaps or repeats")
        c = chosen[rows].astype(int)
        n_chosen = int(c.sum())
        if kind.tag == MULTIVARIATE:
            outcome = c
        elif n_chosen == 1:
            outcome = int(np.flatnonzero(c)[0])
        elif n_chosen == 0 and (kind.tag == OUTSIDE or not require_outcome):
            outcome = None
        elif not require_outcome:
            outcome = None
        else:
            allowed = "at most one" if kind.tag == OUTSIDE else "exactly one"
            _fail(int(lines[rows[0]]), "chosen", f"obs_id {oid!r} has {n_chosen} chosen rows; {allowed} required")
        observations.append((x_all[rows], outcome))
        sizes.append(a.size)

    varying = len(set(sizes)) > 1
    obs = [ChoiceObservation(x, y, positions=list(range(x.shape[0])) if varying else None) for x, y in observations]
    return obs, [str(o) for o in order]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_long_csv(path, observations: Sequence[ChoiceObservation], obs_ids: Optional[Sequence[str]] = None):
    """Write observations in the long format (byte-for-byte deterministic)."""
    if len(observations) == 0:
        raise InvalidOutcome("no observations to write")
    p = observations[0].x.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["obs_id", "alt_id", "chosen"] + [f"cov_{k}" for k in range(1, p + 1)])
        for i, obs in enumerate(observations):
            oid = str(i + 1) if obs_ids is None else str(obs_ids[i])
            if obs.positions is not None and list(obs.positions) != list(range(obs.n_alternatives)):
                raise InvalidOutcome("the long format stores positions 1..k; reorder rows before writing")
            for j in range(obs.n_alternatives):
                y = obs.outcome
                if isinstance(y, np.ndarray):
                    ch = int(y[j])
                else:
                    ch = int(y is not None and y == j)
                w.writerow([oid, j + 1, ch] + [_fmt(v) for v in obs.x[j]])


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------


def _matrix(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"dim": int(a.shape[0]), "data": [float(v) for v in a.ravel()]}


def estimates_document(model: ProbitModel, trace=None, tol_sigma: Optional[float] = None,
                       trace_target: Optional[float] = None) -> dict:
    """JSON-ready description of a fitted model."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "model": model.kind.to_dict(),
        "p": int(model.beta.size),
        "beta": [float(v) for v in model.beta],
        "sigma": _matrix(model.sigma),
        "omega": _matrix(model.omega),
        "trace_target": float(model.dim if trace_target is None else trace_target),
    }
    if trace is not None:
        last = trace.records[-1] if len(trace) else None
        doc["convergence"] = {
            "converged": bool(trace.converged),
            "iterations": int(len(trace)),
            "final_max_abs_sigma_change": float(last.max_abs_sigma_change) if last else None,
            "tol_sigma": None if tol_sigma is None else float(tol_sigma),
        }
    return doc


def write_estimates(path, model: ProbitModel, trace=None, tol_sigma=None, trace_target=None):
    doc = estimates_document(model, trace, tol_sigma, trace_target)
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")
    return doc


def read_estimates(path) -> ProbitModel:
    doc = json.loads(Path(path).read_text())
    try:
        kind = ModelKind.from_dict(doc["model"])
        d = int(doc["sigma"]["dim"])
        sigma = np.asarray(doc["sigma"]["data"], dtype=float).reshape(d, d)
        return ProbitModel(np.asarray(doc["beta"], dtype=float), sigma, kind)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: not an estimates document ({exc})") from exc


def estimates_schema() -> dict:
    return json.loads(resources.files("epprobit").joinpath("schemas/estimates.schema.json").read_text())


class TraceWriter:
    """Newline-delimited JSON sink for iteration records."""

    def __init__(self, path):
        self._fh = open(path, "w")

    def __call__(self, record):
        self._fh.write(json.dumps(record.to_dict(), allow_nan=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def iter_trace(path) -> Iterable[dict]:
    """Records of an NDJSON trace file, in order."""
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
