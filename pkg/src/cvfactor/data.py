"""Count-table and design-matrix containers plus their CSV formats.

counts.csv: header row naming the features; one row per sample with the
sample id first and, optionally, a subject id second.  design.csv: sample
id first, covariate columns after; the intercept is implicit and added
internally.  Both files are plain comma-separated text.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Counts above 2^53 cannot be represented exactly on the latent log scale.
COUNT_MAX = 2 ** 53


class DataFormatError(ValueError):
    """Malformed input file or inconsistent table/design pair."""


@dataclass
class CountTable:
    """N x J non-negative integer counts with sample ids and optional
    subject labels (subject labels switch the model to per-subject
    baselines)."""

    counts: np.ndarray
    sample_ids: list[str]
    feature_names: list[str]
    subjects: list[str] | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2:
            raise DataFormatError("counts must be a 2-D table")
        if not np.issubdtype(self.counts.dtype, np.integer):
            raise DataFormatError("counts must be integers")
        if np.any(self.counts < 0):
            raise DataFormatError("counts must be non-negative")
        if np.any(self.counts > COUNT_MAX):
            raise DataFormatError(f"counts above {COUNT_MAX} are not supported")
        n, j = self.counts.shape
        if len(self.sample_ids) != n or len(self.feature_names) != j:
            raise DataFormatError("id/name lengths do not match the table")
        if self.subjects is not None and len(self.subjects) != n:
            raise DataFormatError("subject labels must cover every sample")

    @property
    def n_samples(self) -> int:
        return self.counts.shape[0]

    @property
    def n_features(self) -> int:
        return self.counts.shape[1]

    def subject_index(self):
        """(codes, labels): integer subject codes in order of first
        appearance.  None when the table has no subject column."""
        if self.subjects is None:
            return None, None
        labels: list[str] = []
        seen: dict[str, int] = {}
        codes = np.empty(self.n_samples, dtype=np.int64)
        for i, s in enumerate(self.subjects):
            if s not in seen:
                seen[s] = len(labels)
                labels.append(s)
            codes[i] = seen[s]
        return codes, labels


@dataclass
class CovariateDesign:
    """N x P design with implicit leading intercept.

    X holds the full matrix including the intercept column; `names` the
    P-1 covariate names; `in_mean` / `in_cov` flag which covariates enter
    the mean and covariance regressions.
    """

    X: np.ndarray
    names: list[str]
    in_mean: np.ndarray = field(default=None)
    in_cov: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names) + 1:
            raise DataFormatError("design must be N x (1 + #names)")
        if not np.all(self.X[:, 0] == 1.0):
            raise DataFormatError("first design column must be the intercept")
        p = len(self.names)
        if self.in_mean is None:
            self.in_mean = np.ones(p, dtype=bool)
        if self.in_cov is None:
            self.in_cov = np.ones(p, dtype=bool)
        self.in_mean = np.asarray(self.in_mean, dtype=bool)
        self.in_cov = np.asarray(self.in_cov, dtype=bool)
        if self.in_mean.shape != (p,) or self.in_cov.shape != (p,):
            raise DataFormatError("role flags must cover every covariate")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def x_cov(self) -> np.ndarray:
        """Covariance-side design including the intercept."""
        return np.column_stack([self.X[:, :1], self.X[:, 1:][:, self.in_cov]])

    def x_mean(self) -> np.ndarray:
        """Mean-side design without the intercept."""
        return self.X[:, 1:][:, self.in_mean]

    def cov_names(self) -> list[str]:
        return [n for n, f in zip(self.names, self.in_cov) if f]

    def mean_names(self) -> list[str]:
        return [n for n, f in zip(self.names, self.in_mean) if f]

    def set_roles(self, roles: dict[str, str]):
        """Assign roles {'mean', 'cov', 'both'} per covariate name.
        Every covariate must be covered and every key must exist."""
        unknown = set(roles) - set(self.names)
        if unknown:
            raise DataFormatError(f"roles reference unknown columns: {sorted(unknown)}")
        missing = set(self.names) - set(roles)
        if missing:
            raise DataFormatError(f"roles missing for columns: {sorted(missing)}")
        valid = {"mean", "cov", "both"}
        bad = {v for v in roles.values() if v not in valid}
        if bad:
            raise DataFormatError(f"invalid roles {sorted(bad)}; use mean/cov/both")
        self.in_mean = np.array([roles[n] in ("mean", "both") for n in self.names])
        self.in_cov = np.array([roles[n] in ("cov", "both") for n in self.names])
        return self


def _read_rows(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"file not found: {path}")
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if len(rows) < 2:
        raise DataFormatError(f"{path}: need a header row and at least one sample")
    return rows


def read_counts(path, subject_column: str = "subject") -> CountTable:
    """Read counts.csv; a second column whose header matches
    `subject_column` is treated as the subject label column."""
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0]]
    has_subject = len(header) > 1 and header[1].lower() == subject_column.lower()
    first_feat = 2 if has_subject else 1
    features = header[first_feat:]
    if not features:
        raise DataFormatError(f"{path}: no feature columns found")
    sample_ids, subjects, data = [], [], []
    for rnum, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(
                f"{path} row {rnum}: expected {len(header)} fields, got {len(row)}")
        sample_ids.append(row[0].strip())
        if has_subject:
            subjects.append(row[1].strip())
        vals = []
        for cnum, tok in enumerate(row[first_feat:], start=first_feat + 1):
            tok = tok.strip()
            try:
                v = int(tok)
            except ValueError:
                raise DataFormatError(
                    f"{path} row {rnum} column {cnum}: "
                    f"non-integer count {tok!r}") from None
            if v < 0:
                raise DataFormatError(
                    f"{path} row {rnum} column {cnum}: negative count {v}")
            vals.append(v)
        data.append(vals)
    return CountTable(
        counts=np.asarray(data, dtype=np.int64),
        sample_ids=sample_ids,
        feature_names=features,
        subjects=subjects if has_subject else None,
    )


def read_design(path, sample_ids: list[str] | None = None) -> CovariateDesign:
    """Read design.csv and prepend the intercept.  When sample_ids is
    given the rows are matched and reordered against it."""
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0]]
    names = header[1:]
    if not names:
        raise DataFormatError(f"{path}: no covariate columns found")
    ids, data = [], []
    for rnum, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(
                f"{path} row {rnum}: expected {len(header)} fields, got {len(row)}")
        ids.append(row[0].strip())
        vals = []
        for cnum, tok in enumerate(row[1:], start=2):
            try:
                vals.append(float(tok))
            except ValueError:
                raise DataFormatError(
                    f"{path} row {rnum} column {cnum}: "
                    f"non-numeric covariate {tok!r}") from None
        data.append(vals)
    X = np.asarray(data, dtype=float)
    if sample_ids is not None:
        lookup = {s: i for i, s in enumerate(ids)}
        missing = [s for s in sample_ids if s not in lookup]
        if missing:
            raise DataFormatError(f"{path}: no design row for samples {missing[:5]}")
        X = X[[lookup[s] for s in sample_ids]]
    for c in range(X.shape[1]):
        if np.all(X[:, c] == X[0, c]):
            raise DataFormatError(
                f"{path}: column {names[c]!r} is constant; the intercept is "
                "implicit and must not be supplied")
    return CovariateDesign(X=np.column_stack([np.ones(len(X)), X]), names=names)


def write_counts(path, table: CountTable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if table.subjects is not None:
            w.writerow(["sample", "subject"] + table.feature_names)
            for sid, subj, row in zip(table.sample_ids, table.subjects, table.counts):
                w.writerow([sid, subj] + [int(v) for v in row])
        else:
            w.writerow(["sample"] + table.feature_names)
            for sid, row in zip(table.sample_ids, table.counts):
                w.writerow([sid] + [int(v) for v in row])


def write_design(path, design: CovariateDesign, sample_ids: list[str]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + design.names)
        for sid, row in zip(sample_ids, design.X[:, 1:]):
            w.writerow([sid] + [repr(float(v)) for v in row])


def write_matrix(path, arr: np.ndarray, header: list[str] | None = None):
    """Write a numeric matrix as CSV with shortest round-trip floats."""
    arr = np.atleast_2d(np.asarray(arr, dtype=float))
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path, skip_header: bool = True) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().strip().splitlines()
    if skip_header:
        lines = lines[1:]
    return np.asarray([[float(t) for t in ln.split(",")] for ln in lines], dtype=float)
