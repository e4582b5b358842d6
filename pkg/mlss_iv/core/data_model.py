"""
Dataset representation, CSV ingestion, fold assignment and construction of
the regressor matrix T and the technical-instrument matrix Z.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Tuple

import attrs
import numpy as np
import pandas as pd

from mlss_iv.core.errors import DataError

logger = logging.getLogger(__name__)

OUTCOME_COLUMN = "y"
TREATMENT_PREFIX = "d_"
COVARIATE_PREFIX = "x_"
INSTRUMENT_PREFIX = "w_"


def _frozen_matrix(values, name: str, *, ndim: int = 2) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@attrs.frozen(eq=False)
class Dataset:
    """Observations (Y, D, X, W) with their column names."""

    y: np.ndarray = attrs.field(converter=lambda v: _frozen_matrix(v, "y", ndim=1))
    d: np.ndarray = attrs.field(converter=lambda v: _frozen_matrix(v, "d"))
    x: np.ndarray = attrs.field(converter=lambda v: _frozen_matrix(v, "x"))
    w: np.ndarray = attrs.field(converter=lambda v: _frozen_matrix(v, "w"))
    d_names: Tuple[str, ...] = attrs.field(default=(), converter=tuple)
    x_names: Tuple[str, ...] = attrs.field(default=(), converter=tuple)
    w_names: Tuple[str, ...] = attrs.field(default=(), converter=tuple)

    def __attrs_post_init__(self) -> None:
        n = self.y.shape[0]
        if n < 2:
            raise DataError(f"a dataset needs at least 2 observations, got {n}")
        # an absent covariate block arrives as shape (0, 0)
        if self.x.size == 0 and self.x.shape[0] != n:
            object.__setattr__(self, "x", _frozen_matrix(np.zeros((n, 0)), "x"))
        for label, block in (("d", self.d), ("x", self.x), ("w", self.w)):
            if block.shape[0] != n:
                raise DataError(f"block {label} has {block.shape[0]} rows, expected {n}")
        if self.d.shape[1] < 1:
            raise DataError("at least one treatment column is required")
        if self.w.shape[1] < 1:
            raise DataError("at least one excluded instrument column is required")
        for label, block in (("y", self.y), ("d", self.d), ("x", self.x), ("w", self.w)):
            if not np.all(np.isfinite(block)):
                raise DataError(f"block {label} contains non-finite values")
        for attr, prefix, width in (
            ("d_names", TREATMENT_PREFIX, self.d.shape[1]),
            ("x_names", COVARIATE_PREFIX, self.x.shape[1]),
            ("w_names", INSTRUMENT_PREFIX, self.w.shape[1]),
        ):
            names = getattr(self, attr)
            if not names:
                object.__setattr__(self, attr, tuple(f"{prefix}{k}" for k in range(width)))
            elif len(names) != width:
                raise DataError(f"{attr} has {len(names)} names for {width} columns")

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p_d(self) -> int:
        return int(self.d.shape[1])

    @property
    def p_x(self) -> int:
        return int(self.x.shape[1])

    @property
    def p_w(self) -> int:
        return int(self.w.shape[1])

    @property
    def xbar(self) -> np.ndarray:
        """[1, Xᵢ′] rows."""
        return np.column_stack([np.ones(self.n), self.x])

    def subset(self, index: np.ndarray) -> "Dataset":
        """Rows ``index`` as a new Dataset (names preserved)."""
        index = np.asarray(index, dtype=int)
        return Dataset(
            y=self.y[index],
            d=self.d[index],
            x=self.x[index] if self.p_x else np.zeros((index.size, 0)),
            w=self.w[index],
            d_names=self.d_names,
            x_names=self.x_names,
            w_names=self.w_names,
        )


@attrs.frozen(eq=False)
class DesignPair:
    """Regressors Tᵢ = [1, Dᵢ′, Xᵢ′]′ and technical instruments Zᵢ = [1, Wᵢ′, Xᵢ′]′."""

    t: np.ndarray
    z: np.ndarray
    p_d: int
    p_x: int

    @property
    def n(self) -> int:
        return int(self.t.shape[0])

    @property
    def tau_index(self) -> np.ndarray:
        """Column positions of the treatment block inside T."""
        return np.arange(1, 1 + self.p_d)

    @property
    def d(self) -> np.ndarray:
        return self.t[:, 1:1 + self.p_d]

    @property
    def x(self) -> np.ndarray:
        return self.t[:, 1 + self.p_d:]

    @property
    def xbar(self) -> np.ndarray:
        """The constant and covariate columns of T."""
        return np.column_stack([self.t[:, :1], self.x])


@attrs.frozen(eq=False)
class FoldAssignment:
    """K disjoint folds S₁..S_K covering 0..n-1.

    ``full_sample`` marks the no-splitting mode: a single fold whose training
    set is the whole sample.
    """

    folds: Tuple[np.ndarray, ...]
    seed: int
    n: int
    full_sample: bool = False

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def fold_of(self) -> np.ndarray:
        out = np.empty(self.n, dtype=int)
        for j, idx in enumerate(self.folds):
            out[idx] = j
        return out

    def eval_index(self, j: int) -> np.ndarray:
        """S_j."""
        return self.folds[j]

    def train_index(self, j: int) -> np.ndarray:
        """S_{-j}; the whole sample in full-sample mode."""
        if self.full_sample:
            return np.arange(self.n)
        mask = np.ones(self.n, dtype=bool)
        mask[self.folds[j]] = False
        return np.nonzero(mask)[0]

    @classmethod
    def full(cls, n: int) -> "FoldAssignment":
        """Full-sample mode: nuisances trained and evaluated on all n rows."""
        idx = np.arange(n)
        idx.setflags(write=False)
        return cls(folds=(idx,), seed=0, n=n, full_sample=True)


def make_folds(n: int, k: int, seed: int) -> FoldAssignment:
    """
    Randomly split 0..n-1 into k balanced folds.

    A seeded permutation is cut into k contiguous blocks; the first ``n % k``
    folds receive one extra observation. Each fold's indices are sorted.

    Raises:
        DataError: when k < 2 or k > n
    """
    if k < 2 or k > n:
        raise DataError(f"number of folds must satisfy 2 <= K <= n, got K={k}, n={n}")
    rng = np.random.default_rng(int(seed) % 2**64)
    perm = rng.permutation(n)
    folds = []
    for block in np.array_split(perm, k):
        block = np.sort(block)
        block.setflags(write=False)
        folds.append(block)
    return FoldAssignment(folds=tuple(folds), seed=int(seed), n=n)


def design_matrices(ds: Dataset) -> DesignPair:
    """Assemble T = [1, D, X] and Z = [1, W, X]."""
    ones = np.ones((ds.n, 1))
    t = np.hstack([ones, ds.d, ds.x])
    z = np.hstack([ones, ds.w, ds.x])
    t.setflags(write=False)
    z.setflags(write=False)
    return DesignPair(t=t, z=z, p_d=ds.p_d, p_x=ds.p_x)


# ----------------------------------------------------------------------
# CSV ingestion
# ----------------------------------------------------------------------

def _column_roles(header: List[str], strict: bool) -> Tuple[int, List[int], List[int], List[int]]:
    seen = set()
    y_cols, d_cols, x_cols, w_cols, unknown = [], [], [], [], []
    for pos, name in enumerate(header):
        if name in seen:
            if name == OUTCOME_COLUMN:
                raise DataError(f"duplicate outcome column '{OUTCOME_COLUMN}'")
            raise DataError(f"duplicate column name '{name}'")
        seen.add(name)
        if name == OUTCOME_COLUMN:
            y_cols.append(pos)
        elif name.startswith(TREATMENT_PREFIX):
            d_cols.append(pos)
        elif name.startswith(COVARIATE_PREFIX):
            x_cols.append(pos)
        elif name.startswith(INSTRUMENT_PREFIX):
            w_cols.append(pos)
        else:
            unknown.append(name)

    if not y_cols:
        raise DataError(f"missing outcome column '{OUTCOME_COLUMN}'")
    if not d_cols:
        raise DataError(f"no treatment columns (prefix '{TREATMENT_PREFIX}')")
    if not w_cols:
        raise DataError(f"no excluded instrument columns (prefix '{INSTRUMENT_PREFIX}')")
    if unknown:
        if strict:
            raise DataError(f"columns without a recognised role: {', '.join(unknown)}")
        logger.warning("ignoring columns without a recognised role: %s", ", ".join(unknown))
    return y_cols[0], d_cols, x_cols, w_cols


def load_csv(path: str | Path, strict: bool = True) -> Dataset:
    """
    Load a Dataset from a UTF-8 CSV (BOM tolerated) whose header declares column roles.

    ``y`` is the outcome; ``d_*`` treatments, ``x_*`` covariates and ``w_*``
    excluded instruments, each kept in file order. With ``strict`` any other
    column is an error, otherwise it is skipped with a warning.

    Raises:
        FileNotFoundError: when ``path`` does not exist
        DataError: on schema violations or unparsable cells (row and column named)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Data file not found: {path}")

    try:
        raw = pd.read_csv(
            path,
            header=None,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8-sig",
            skip_blank_lines=True,
        )
    except pd.errors.EmptyDataError:
        raise DataError(f"empty file: {path}")
    except (UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise DataError(f"failed to parse {path}: {exc}")

    if raw.shape[0] == 0:
        raise DataError(f"empty file: {path}")
    header = [str(h).strip() for h in raw.iloc[0].tolist()]
    body = raw.iloc[1:]
    if body.shape[0] == 0:
        raise DataError(f"no data rows in {path}")

    y_pos, d_pos, x_pos, w_pos = _column_roles(header, strict)
    used = [y_pos] + d_pos + x_pos + w_pos
    values = np.empty((body.shape[0], len(used)))
    for out_col, pos in enumerate(used):
        cells = body.iloc[:, pos].str.strip()
        parsed = pd.to_numeric(cells, errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(parsed)
        if bad.any():
            row = int(np.argmax(bad))
            # data row numbers are 1-based, the header is row 0
            raise DataError(
                f"row {row + 1}, column '{header[pos]}': cannot parse {cells.iloc[row]!r} as a finite number"
            )
        values[:, out_col] = parsed

    n_d, n_x = len(d_pos), len(x_pos)
    return Dataset(
        y=values[:, 0],
        d=values[:, 1:1 + n_d],
        x=values[:, 1 + n_d:1 + n_d + n_x] if n_x else np.zeros((values.shape[0], 0)),
        w=values[:, 1 + n_d + n_x:],
        d_names=[header[p] for p in d_pos],
        x_names=[header[p] for p in x_pos],
        w_names=[header[p] for p in w_pos],
    )


def write_csv(ds: Dataset, path: str | Path) -> Path:
    """Write ``ds`` in the layout ``load_csv`` reads; floats use their shortest round-trip repr."""
    path = Path(path)
    columns = {OUTCOME_COLUMN: ds.y}
    for k, name in enumerate(ds.d_names):
        columns[name] = ds.d[:, k]
    for k, name in enumerate(ds.x_names):
        columns[name] = ds.x[:, k]
    for k, name in enumerate(ds.w_names):
        columns[name] = ds.w[:, k]
    frame = pd.DataFrame({name: [repr(float(v)) for v in col] for name, col in columns.items()})
    frame.to_csv(path, index=False, lineterminator="\n")
    return path

