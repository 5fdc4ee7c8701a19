"""Count matrices, file ingestion, gene filtering and size factors.

Dense CSV files are cells-as-rows with a header of gene ids and a first
column of cell ids.  Triplet files follow the Matrix Market coordinate
layout (1-based ``row col value`` lines after a ``rows cols nnz`` line);
their ids live in sibling ``<stem>.cells.txt`` / ``<stem>.genes.txt`` files.
"""
from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import (
    DegenerateCellError,
    DimensionError,
    DomainError,
    EmptySelectionError,
    ParseError,
)

__all__ = [
    "CountMatrix",
    "CovariateMatrix",
    "SizeFactors",
    "load_counts",
    "load_covariates",
    "load_size_factors",
    "write_dense_csv",
    "write_triplet",
    "filter_genes_iqr",
    "select_top_sd",
    "compute_size_factors",
]

# genes densified at once when scanning sparse matrices column-wise
_CHUNK = 2048


class CountMatrix:
    """N x G matrix of non-negative integer read counts.

    ``counts`` is either a dense ``int64`` array or a scipy CSC matrix; large
    triplet inputs stay sparse until gene filtering has reduced them.
    """

    def __init__(self, counts, cell_ids=None, gene_ids=None):
        if sp.issparse(counts):
            counts = sp.csc_matrix(counts)
            data = counts.data
        else:
            counts = np.asarray(counts)
            if counts.ndim != 2:
                raise DimensionError(f"counts must be 2-d, got shape {counts.shape}")
            data = counts
        _check_integral(data)
        if sp.issparse(counts):
            counts = counts.astype(np.int64)
            counts.eliminate_zeros()
        else:
            counts = np.ascontiguousarray(counts, dtype=np.int64)
        n, g = counts.shape
        if n == 0 or g == 0:
            raise DimensionError(f"empty count matrix {counts.shape}")
        self.counts = counts
        self.cell_ids = _ids(cell_ids, n, "cell")
        self.gene_ids = _ids(gene_ids, g, "gene")

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return self.counts.shape[1]

    @property
    def shape(self):
        return self.counts.shape

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.counts)

    def dense(self) -> np.ndarray:
        if self.is_sparse:
            return np.asarray(self.counts.toarray(), dtype=np.int64)
        return self.counts

    def subset_genes(self, idx) -> "CountMatrix":
        idx = np.asarray(idx, dtype=np.intp)
        sub = self.counts[:, idx]
        return CountMatrix(sub, self.cell_ids, [self.gene_ids[i] for i in idx])

    def column_blocks(self, chunk: int = _CHUNK):
        """Yield ``(start, dense_block)`` pairs covering all genes."""
        for start in range(0, self.n_genes, chunk):
            block = self.counts[:, start:start + chunk]
            if sp.issparse(block):
                block = block.toarray()
            yield start, np.asarray(block)

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"CountMatrix({self.n_cells} cells x {self.n_genes} genes, {kind})"


@dataclass
class CovariateMatrix:
    values: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise DimensionError("covariates must be an N x P matrix")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("covariates must be finite")
        self.names = _ids(self.names or None, self.values.shape[1], "x")

    @property
    def n_covariates(self) -> int:
        return self.values.shape[1]


@dataclass
class SizeFactors:
    t: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).ravel()
        if not np.all(np.isfinite(self.t)) or np.any(self.t <= 0):
            raise DomainError("size factors must be finite and strictly positive")

    def __len__(self):
        return self.t.size


def _ids(ids, n, prefix):
    if ids is None:
        return [f"{prefix}{i + 1}" for i in range(n)]
    ids = [str(s) for s in ids]
    if len(ids) != n:
        raise DimensionError(f"expected {n} {prefix} ids, got {len(ids)}")
    return ids


def _check_integral(values):
    values = np.asarray(values)
    if values.size == 0:
        return
    if values.dtype.kind in "iu":
        if values.dtype.kind == "i" and values.min() < 0:
            raise DomainError("counts must be non-negative")
        return
    if values.dtype.kind == "b":
        return
    values = values.astype(float, copy=False)
    if not np.all(np.isfinite(values)):
        raise DomainError("counts must be finite")
    if np.any(values < 0):
        raise DomainError("counts must be non-negative")
    if np.any(values != np.floor(values)):
        raise DomainError("counts must be integers")


def _to_numbers(tokens, what):
    try:
        return np.asarray(tokens, dtype=str).astype(float)
    except ValueError as exc:
        raise ParseError(f"non-numeric {what}: {exc}") from None


def _parse_whitespace_numbers(text, path):
    # fromstring is far lighter than str.split on multi-million entry files;
    # it only warns on a bad token, so promote that to an error
    if not text.strip():
        return np.zeros(0)
    with warnings.catch_warnings():
        warnings.simplefilter("error", DeprecationWarning)
        try:
            return np.fromstring(text, dtype=float, sep=" ")
        except (DeprecationWarning, ValueError):
            raise ParseError(f"{path}: non-numeric triplet entry") from None


# -- ingestion ---------------------------------------------------------------

def load_counts(path, format: str | None = None, cell_ids_path=None, gene_ids_path=None) -> CountMatrix:
    """Read a count matrix from ``path``.

    ``format`` is ``"dense-csv"`` or ``"matrix-market-triplet"``; when omitted
    it is inferred from the extension (``.mtx`` means triplet).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        format = "matrix-market-triplet" if path.suffix == ".mtx" else "dense-csv"
    if format == "dense-csv":
        return _load_dense_csv(path)
    if format == "matrix-market-triplet":
        return _load_triplet(path, cell_ids_path, gene_ids_path)
    raise ValueError(f"unknown count format {format!r}")


def _load_dense_csv(path: Path) -> CountMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if len(header) < 2:
        raise ParseError(f"{path}: header must list gene ids after a corner cell")
    gene_ids = header[1:]
    if not body:
        raise ParseError(f"{path}: no data rows")
    width = len(header)
    for i, row in enumerate(body, start=2):
        if len(row) != width:
            raise ParseError(f"{path}:{i}: expected {width} fields, got {len(row)}")
    cell_ids = [r[0] for r in body]
    values = _to_numbers([r[1:] for r in body], "count")
    _check_integral(values)
    return CountMatrix(values.astype(np.int64), cell_ids, gene_ids)


def _read_ids(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def _load_triplet(path: Path, cell_ids_path=None, gene_ids_path=None) -> CountMatrix:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("%%MatrixMarket"):
            banner = first.lower().split()
            if "coordinate" not in banner:
                raise ParseError(f"{path}: only coordinate (triplet) Matrix Market files are supported")
            line = fh.readline()
        else:
            line = first
        while line.startswith("%"):
            line = fh.readline()
        dims = line.split()
        try:
            n_rows, n_cols, nnz = (int(v) for v in dims)
        except ValueError:
            raise ParseError(f"{path}: malformed dimension line {line.strip()!r}") from None
        if n_rows <= 0 or n_cols <= 0 or nnz < 0:
            raise ParseError(f"{path}: invalid dimensions {dims}")
        text = fh.read()
    flat = _parse_whitespace_numbers(text, path)
    if flat.size != 3 * nnz:
        raise ParseError(f"{path}: header declares {nnz} entries, found {flat.size / 3:g}")
    trip = flat.reshape(-1, 3)
    rows, cols, vals = trip[:, 0], trip[:, 1], trip[:, 2]
    if np.any(rows != np.floor(rows)) or np.any(cols != np.floor(cols)):
        raise ParseError(f"{path}: non-integer index")
    _check_integral(vals)
    rows = rows.astype(np.intp) - 1
    cols = cols.astype(np.intp) - 1
    if nnz and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n_rows or cols.max() >= n_cols):
        raise DimensionError(f"{path}: entry index outside declared {n_rows} x {n_cols}")
    mat = sp.csc_matrix((vals.astype(np.int64), (rows, cols)), shape=(n_rows, n_cols))

    stem = str(path)[: -len(path.suffix)] if path.suffix else str(path)
    cell_ids_path = cell_ids_path or (stem + ".cells.txt")
    gene_ids_path = gene_ids_path or (stem + ".genes.txt")
    cell_ids = _read_ids(cell_ids_path) if os.path.exists(cell_ids_path) else None
    gene_ids = _read_ids(gene_ids_path) if os.path.exists(gene_ids_path) else None
    if cell_ids is not None and len(cell_ids) != n_rows:
        raise DimensionError(f"{cell_ids_path}: {len(cell_ids)} ids for {n_rows} rows")
    if gene_ids is not None and len(gene_ids) != n_cols:
        raise DimensionError(f"{gene_ids_path}: {len(gene_ids)} ids for {n_cols} columns")
    return CountMatrix(mat, cell_ids, gene_ids)


def load_covariates(path, n_cells: int | None = None) -> CovariateMatrix:
    """CSV with a header row (corner + covariate names) and one row per cell."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) < 2 or len(rows[0]) < 2:
        raise ParseError(f"{path}: covariate file needs a header and at least one row")
    values = _to_numbers([r[1:] for r in rows[1:]], "covariate")
    cov = CovariateMatrix(values, rows[0][1:])
    if n_cells is not None and cov.values.shape[0] != n_cells:
        raise DimensionError(f"{path}: {cov.values.shape[0]} covariate rows for {n_cells} cells")
    return cov


def load_size_factors(path, n_cells: int | None = None) -> SizeFactors:
    """CSV of ``cell_id,size_factor`` lines; a non-numeric first line is a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        float(rows[0][-1])
    except (ValueError, IndexError):
        rows = rows[1:]
    t = _to_numbers([r[-1] for r in rows], "size factor")
    sf = SizeFactors(t)
    if n_cells is not None and len(sf) != n_cells:
        raise DimensionError(f"{path}: {len(sf)} size factors for {n_cells} cells")
    return sf


def write_dense_csv(m: CountMatrix, path) -> None:
    dense = m.dense()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell"] + list(m.gene_ids))
        for cid, row in zip(m.cell_ids, dense):
            w.writerow([cid] + row.tolist())


def write_triplet(m: CountMatrix, path) -> None:
    """Write Matrix Market coordinate file plus sibling id files."""
    path = Path(path)
    coo = sp.coo_matrix(m.counts)
    coo.sum_duplicates()
    # row-major entry order keeps output deterministic
    order = np.lexsort((coo.col, coo.row))
    trip = np.column_stack([coo.row[order] + 1, coo.col[order] + 1, coo.data[order]]).astype(np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"{m.n_cells} {m.n_genes} {trip.shape[0]}\n")
        np.savetxt(fh, trip, fmt="%d")
    stem = str(path)[: -len(path.suffix)]
    Path(stem + ".cells.txt").write_text("\n".join(m.cell_ids) + "\n", encoding="utf-8")
    Path(stem + ".genes.txt").write_text("\n".join(m.gene_ids) + "\n", encoding="utf-8")


# -- filtering ---------------------------------------------------------------

def gene_iqr(m: CountMatrix) -> np.ndarray:
    """Per-gene Q3 - Q1 using linear interpolation between order statistics."""
    out = np.empty(m.n_genes)
    for start, block in m.column_blocks():
        q1, q3 = np.percentile(block, [25, 75], axis=0, method="linear")
        out[start:start + block.shape[1]] = q3 - q1
    return out


def gene_sd(m: CountMatrix) -> np.ndarray:
    out = np.empty(m.n_genes)
    ddof = 1 if m.n_cells > 1 else 0
    for start, block in m.column_blocks():
        out[start:start + block.shape[1]] = np.std(block.astype(float), axis=0, ddof=ddof)
    return out


def filter_genes_iqr(m: CountMatrix, threshold: float = 1.0):
    """Keep genes whose interquartile range across cells exceeds ``threshold``."""
    kept = np.flatnonzero(gene_iqr(m) > threshold)
    if kept.size == 0:
        raise EmptySelectionError(f"no gene has IQR > {threshold}")
    return m.subset_genes(kept), kept


def select_top_sd(m: CountMatrix, n_top: int):
    """Keep the ``n_top`` genes with the largest sample standard deviation.

    Ties go to the lower original index; kept genes stay in original order.
    """
    if n_top < 1:
        raise ValueError("n_top must be positive")
    if n_top > m.n_genes:
        raise DimensionError(f"n_top={n_top} exceeds {m.n_genes} genes")
    sd = gene_sd(m)
    ranked = np.argsort(-sd, kind="stable")
    kept = np.sort(ranked[:n_top])
    return m.subset_genes(kept), kept


def compute_size_factors(m_raw: CountMatrix) -> SizeFactors:
    """Library sizes: per-cell total counts of the unfiltered matrix."""
    totals = np.asarray(m_raw.counts.sum(axis=1), dtype=np.int64).ravel()
    empty = np.flatnonzero(totals == 0)
    if empty.size:
        raise DegenerateCellError(
            f"{empty.size} cell(s) have zero total count, first: {m_raw.cell_ids[empty[0]]}"
        )
    return SizeFactors(totals.astype(float))
