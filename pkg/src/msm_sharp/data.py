"""Tabular observational data: loading, validation and standardization."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated (X, Z, Y) sample. Arrays are read-only copies.

    Construct through :func:`validate_dataset` (or :func:`load_csv`); the raw
    constructor does not check invariants.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple = ()
    known_propensity: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.outcome.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Rows ``rows`` (with repetition allowed), without revalidation."""
        kp = None if self.known_propensity is None else _frozen(self.known_propensity[rows])
        return Dataset(
            covariates=_frozen(self.covariates[rows]),
            treatment=_frozen(self.treatment[rows], dtype=np.int8),
            outcome=_frozen(self.outcome[rows]),
            covariate_names=self.covariate_names,
            known_propensity=kp,
        )

    def with_outcome(self, outcome) -> "Dataset":
        return validate_dataset(
            self.covariates, self.treatment, outcome, self.covariate_names, self.known_propensity
        )

    def equals(self, other: "Dataset", rtol: float = 0.0) -> bool:
        if self.covariate_names != other.covariate_names:
            return False
        if (self.known_propensity is None) != (other.known_propensity is None):
            return False
        pairs = [
            (self.covariates, other.covariates),
            (self.outcome, other.outcome),
            (self.treatment, other.treatment),
        ]
        if self.known_propensity is not None:
            pairs.append((self.known_propensity, other.known_propensity))
        for a, b in pairs:
            if a.shape != b.shape or not np.allclose(a, b, rtol=rtol, atol=0.0):
                return False
        return True


def validate_dataset(
    covariates,
    treatment=None,
    outcome=None,
    covariate_names: Optional[Sequence[str]] = None,
    known_propensity=None,
) -> Dataset:
    """Check every Dataset invariant and return an immutable Dataset.

    Each violated invariant raises :class:`DataError` with its own message.
    Accepts an existing :class:`Dataset` as the first argument too.
    """
    if isinstance(covariates, Dataset):
        ds = covariates
        return validate_dataset(
            ds.covariates, ds.treatment, ds.outcome, ds.covariate_names, ds.known_propensity
        )
    if treatment is None or outcome is None:
        raise DataError("treatment and outcome are required")

    X = np.asarray(covariates, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DataError(f"covariates must be a 2-d matrix, got shape {X.shape}")
    y = np.asarray(outcome, dtype=float).ravel()
    z_raw = np.asarray(treatment, dtype=float).ravel()
    n = y.shape[0]
    if n < 2:
        raise DataError(f"need at least 2 rows, got n={n}")
    if X.shape[1] < 1:
        raise DataError("need at least one covariate column")
    if X.shape[0] != n or z_raw.shape[0] != n:
        raise DataError(
            f"length mismatch: covariates {X.shape[0]}, treatment {z_raw.shape[0]}, outcome {n}"
        )
    if not np.all(np.isfinite(X)):
        i, j = np.argwhere(~np.isfinite(X))[0]
        raise DataError(f"non-finite covariate at row {i}, column {j}")
    if not np.all(np.isfinite(y)):
        i = int(np.flatnonzero(~np.isfinite(y))[0])
        raise DataError(f"non-finite outcome at row {i}")
    if not np.all(np.isin(z_raw, (0.0, 1.0))):
        i = int(np.flatnonzero(~np.isin(z_raw, (0.0, 1.0)))[0])
        raise DataError(f"treatment value {z_raw[i]!r} at row {i} is not 0 or 1")
    z = z_raw.astype(np.int8)
    if z.min() == z.max():
        raise DataError("treatment has a single level")

    if covariate_names is None:
        names = tuple(f"x{j + 1}" for j in range(X.shape[1]))
    else:
        names = tuple(str(s) for s in covariate_names)
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} covariate names for {X.shape[1]} columns")
        if len(set(names)) != len(names):
            raise DataError("duplicate covariate names")

    kp = None
    if known_propensity is not None:
        e = np.asarray(known_propensity, dtype=float).ravel()
        if e.shape[0] != n:
            raise DataError(f"known_propensity has length {e.shape[0]}, expected {n}")
        bad = ~(np.isfinite(e) & (e > 0.0) & (e < 1.0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"propensity {e[i]!r} at row {i} is outside (0, 1)")
        kp = _frozen(e)

    return Dataset(
        covariates=_frozen(X),
        treatment=_frozen(z, dtype=np.int8),
        outcome=_frozen(y),
        covariate_names=names,
        known_propensity=kp,
    )


def _parse_cell(text: str, line: int, col: str) -> float:
    s = text.strip()
    if s == "":
        raise DataError(f"missing value at row {line - 1} (line {line}), column {col!r}")
    try:
        v = float(s)
    except ValueError:
        raise DataError(
            f"non-numeric value {s!r} at row {line - 1} (line {line}), column {col!r}"
        ) from None
    if not math.isfinite(v):
        raise DataError(f"missing or non-finite value {s!r} at row {line - 1} (line {line}), column {col!r}")
    return v


def load_csv(
    path,
    outcome_col: str,
    treatment_col: str,
    propensity_col: Optional[str] = None,
) -> Dataset:
    """Read a comma-separated file with a header row into a Dataset.

    Every column other than the outcome, treatment and (optional) propensity
    columns is a covariate, in file order. Row numbers in error messages
    count data rows from 1; ``line`` is the physical line in the file.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    seen = set()
    for h in header:
        if h in seen:
            raise DataError(f"duplicate column {h!r} in header")
        seen.add(h)
    special = {"outcome": outcome_col, "treatment": treatment_col}
    if propensity_col is not None:
        special["propensity"] = propensity_col
    for role, col in special.items():
        if col not in header:
            raise DataError(f"{role} column {col!r} not found in header")
    if len(set(special.values())) != len(special):
        raise DataError("outcome, treatment and propensity columns must be distinct")

    cov_cols = [h for h in header if h not in special.values()]
    if not cov_cols:
        raise DataError("no covariate columns left after removing outcome/treatment/propensity")

    index = {h: j for j, h in enumerate(header)}
    values = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise DataError(f"row {i + 1} (line {line}) has {len(row)} fields, header has {len(header)}")
        for h, j in index.items():
            values[i, j] = _parse_cell(row[j], line, h)

    z = values[:, index[treatment_col]]
    bad = ~np.isin(z, (0.0, 1.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"treatment value {z[i]:g} at row {i + 1} (line {i + 2}), column {treatment_col!r} is not 0 or 1"
        )
    e = None
    if propensity_col is not None:
        e = values[:, index[propensity_col]]
        bad = ~((e > 0.0) & (e < 1.0))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(
                f"propensity {e[i]:g} at row {i + 1} (line {i + 2}), column {propensity_col!r} is outside (0, 1)"
            )
    return validate_dataset(
        values[:, [index[c] for c in cov_cols]],
        z,
        values[:, index[outcome_col]],
        cov_cols,
        e,
    )


def write_csv(ds: Dataset, path, outcome_col: str = "y", treatment_col: str = "z",
              propensity_col: Optional[str] = "e") -> None:
    """Inverse of :func:`load_csv`; values written with full precision."""
    cols = list(ds.covariate_names) + [treatment_col, outcome_col]
    data = [ds.covariates, ds.treatment[:, None], ds.outcome[:, None]]
    if ds.known_propensity is not None and propensity_col is not None:
        cols.append(propensity_col)
        data.append(ds.known_propensity[:, None])
    table = np.hstack([np.asarray(a, dtype=float) for a in data])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class Standardization:
    means: np.ndarray
    sds: np.ndarray
    constant_columns: tuple = field(default=())

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.means) / self.sds

    def invert(self, Xs: np.ndarray) -> np.ndarray:
        return np.asarray(Xs, dtype=float) * self.sds + self.means


def standardize_covariates(ds: Dataset) -> tuple[Dataset, Standardization]:
    """Center and scale non-constant covariate columns to mean 0, sd 1.

    Sample sd uses ``ddof=1``. Constant columns are left alone (mean 0, sd 1
    in the stored transform) and reported with a warning.
    """
    X = ds.covariates
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1) if ds.n > 1 else np.zeros(ds.d)
    const = tuple(int(j) for j in np.flatnonzero(np.ptp(X, axis=0) == 0))
    if const:
        warnings.warn(f"constant covariate columns left unscaled: {list(const)}", stacklevel=2)
        means = means.copy()
        sds = sds.copy()
        means[list(const)] = 0.0
        sds[list(const)] = 1.0
    std = Standardization(_frozen(means), _frozen(sds), const)
    Xs = std.apply(X)
    out = Dataset(
        covariates=_frozen(Xs),
        treatment=ds.treatment,
        outcome=ds.outcome,
        covariate_names=ds.covariate_names,
        known_propensity=ds.known_propensity,
    )
    return out, std
