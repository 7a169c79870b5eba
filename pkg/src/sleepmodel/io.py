"""Hypnogram text files, likelihood CSVs and 5x5 matrix CSVs."""

from __future__ import annotations

import csv
import io
import warnings
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import N_STAGES, STAGE_TOKENS, Hypnogram, SleepStage

LIKELIHOOD_HEADER = ",".join(STAGE_TOKENS)
# Rows this close to 1 are kept bit-exact so write/read round-trips are lossless.
_EXACT_SUM_TOL = 1e-12


class FormatError(ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


def parse_hypnograms(text: str, default_id: str = "record-0", path: str | None = None
                     ) -> list[Hypnogram]:
    records: list[Hypnogram] = []
    current_id: str | None = None
    current: list[SleepStage] = []
    header_line = 0

    def flush():
        if current_id is None:
            return
        if not current:
            raise FormatError(f"record {current_id!r} has no epochs", header_line, path)
        records.append(Hypnogram(current_id, tuple(current)))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("=="):
            flush()
            current_id = line[2:].strip()
            if not current_id:
                raise FormatError("record header without an id", lineno, path)
            current = []
            header_line = lineno
            continue
        if current_id is None:
            current_id, header_line = default_id, lineno
        for tok in line.split():
            try:
                current.append(SleepStage.from_token(tok))
            except ValueError:
                raise FormatError(f"unknown stage token {tok!r}", lineno, path) from None
    flush()
    return records


def format_hypnograms(records: Iterable[Hypnogram]) -> str:
    out = io.StringIO()
    for rec in records:
        out.write(f"== {rec.record_id}\n")
        for s in rec.stages:
            out.write(s.name)
            out.write("\n")
    return out.getvalue()


def read_hypnograms(path: str | Path) -> list[Hypnogram]:
    path = Path(path)
    return parse_hypnograms(path.read_text(encoding="utf-8"), default_id=path.stem,
                            path=str(path))


def write_hypnograms(path: str | Path, records: Iterable[Hypnogram]) -> None:
    Path(path).write_text(format_hypnograms(records), encoding="utf-8")


def _read_float_rows(text: str, path: str | None, header: str | None):
    rows = []
    need_header = header is not None
    reader = csv.reader(io.StringIO(text))
    for lineno, fields in enumerate(reader, start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        if need_header:
            need_header = False
            if ",".join(f.strip() for f in fields) != header:
                raise FormatError(f"expected header {header!r}", lineno, path)
            continue
        if len(fields) != N_STAGES:
            raise FormatError(f"expected {N_STAGES} columns, got {len(fields)}", lineno, path)
        try:
            row = [float(f) for f in fields]
        except ValueError:
            raise FormatError("non-numeric value", lineno, path) from None
        rows.append((lineno, row))
    return rows


def parse_likelihoods(text: str, path: str | None = None) -> np.ndarray:
    """Parse a likelihood CSV into a T x 5 array.

    Rows are renormalized. A deviation of the row sum from 1 above 1e-6
    triggers a warning, and 1e-3 or more is an error.
    """
    rows = _read_float_rows(text, path, LIKELIHOOD_HEADER)
    if not rows:
        raise FormatError("likelihood file has no rows", None, path)
    m = np.array([r for _, r in rows], dtype=np.float64)
    for (lineno, _), row in zip(rows, m):
        if not np.all(np.isfinite(row)) or np.any(row < 0):
            raise FormatError("likelihoods must be finite and non-negative", lineno, path)
        dev = abs(row.sum() - 1.0)
        if dev >= 1e-3:
            raise FormatError(f"row sums to {row.sum()!r}", lineno, path)
        if dev > 1e-6:
            warnings.warn(f"{path or '<csv>'}:{lineno}: row sums to {row.sum()!r}; "
                          "renormalizing", stacklevel=2)
        if dev > _EXACT_SUM_TOL:
            row /= row.sum()
    return m


def format_likelihoods(matrix: np.ndarray) -> str:
    lines = [LIKELIHOOD_HEADER]
    for row in np.asarray(matrix, dtype=np.float64):
        lines.append(",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def read_likelihoods(path: str | Path) -> np.ndarray:
    path = Path(path)
    return parse_likelihoods(path.read_text(encoding="utf-8"), str(path))


def write_likelihoods(path: str | Path, matrix: np.ndarray) -> None:
    Path(path).write_text(format_likelihoods(matrix), encoding="utf-8")


def read_stochastic_matrix(path: str | Path, atol: float = 1e-9) -> np.ndarray:
    """Load a 5x5 row-stochastic matrix (no header, canonical stage order)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    first = text.lstrip().split("\n", 1)[0]
    header = LIKELIHOOD_HEADER if first.strip() == LIKELIHOOD_HEADER else None
    rows = _read_float_rows(text, str(path), header)
    if len(rows) != N_STAGES:
        raise FormatError(f"expected {N_STAGES} rows, got {len(rows)}", None, str(path))
    m = np.array([r for _, r in rows])
    for (lineno, _), row in zip(rows, m):
        if np.any(row < 0) or abs(row.sum() - 1.0) > atol:
            raise FormatError("row is not a probability distribution", lineno, str(path))
    return m


def write_stochastic_matrix(path: str | Path, matrix: Sequence[Sequence[float]]) -> None:
    lines = [LIKELIHOOD_HEADER]
    for row in np.asarray(matrix, dtype=np.float64):
        lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
