"""Shared domain types, seeded random streams and CSV I/O."""
from __future__ import annotations

import csv
import hashlib
import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class PeriodicImputeError(Exception):
    """Base class for all library errors."""

    category = "error"


class DomainError(PeriodicImputeError, ValueError):
    category = "domain"


class PreconditionError(PeriodicImputeError, ValueError):
    category = "precondition"


class ConfigError(PeriodicImputeError, ValueError):
    category = "config"


class ParseError(PeriodicImputeError, ValueError):
    category = "parse"


class ConditioningError(PeriodicImputeError, ArithmeticError):
    category = "numerical"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Equally spaced daily series with an observed/missing mask.

    ``mask`` is True where a value is observed.  Missing positions hold NaN so
    that an accidental read is loud rather than silently wrong.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise DomainError("TimeSeries values must be one-dimensional")
        if self.mask is None:
            mask = np.ones(values.shape, dtype=bool)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise DomainError(
                    f"mask length {mask.size} != values length {values.size}")
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))

    def __len__(self) -> int:
        return self.values.size

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def index(self) -> np.ndarray:
        return np.arange(self.values.size)

    @property
    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    @property
    def missing_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


@dataclass(frozen=True)
class SeedSpec:
    """A master seed plus an ordered path of labelled integers.

    >>> SeedSpec(7).child("rep", 3).child("method", 1).stream_path
    (('rep', 3), ('method', 1))
    """

    master_seed: int
    stream_path: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise DomainError("master_seed must be a 64-bit unsigned integer")
        path = tuple((str(label), int(value)) for label, value in self.stream_path)
        object.__setattr__(self, "master_seed", int(self.master_seed))
        object.__setattr__(self, "stream_path", path)

    def child(self, label: str, value: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, self.stream_path + ((label, int(value)),))

    def entropy(self) -> int:
        key = self.master_seed.to_bytes(8, "little")
        h = hashlib.blake2b(key=key, digest_size=32, person=b"periodic-impute")
        for label, value in self.stream_path:
            token = f"{label}={value};".encode("utf-8")
            h.update(len(token).to_bytes(4, "little"))
            h.update(token)
        return int.from_bytes(h.digest(), "little")


def derive_stream(seed: SeedSpec) -> np.random.Generator:
    """Return a PCG64 generator that is a pure function of ``seed``.

    The master seed keys a BLAKE2b hash over the labelled path; the 256-bit
    digest seeds a ``SeedSequence``.  No global RNG state is touched.
    """
    if not seed.stream_path:
        raise PreconditionError("stream_path must be non-empty")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed.entropy())))


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """Named real columns of common length with per-cell observed flags."""

    names: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        names = tuple(self.names)
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(names):
            raise DomainError(
                f"values shape {values.shape} does not match {len(names)} column names")
        if len(set(names)) != len(names):
            raise DomainError(f"duplicate column names in {names}")
        if self.mask is None:
            mask = np.isfinite(values)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise DomainError("mask shape does not match values shape")
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))

    @classmethod
    def from_columns(cls, columns: Mapping[str, Sequence[float]],
                     masks: Mapping[str, Sequence[bool]] | None = None) -> "DataMatrix":
        names = tuple(columns)
        lengths = {len(columns[k]) for k in names}
        if len(lengths) > 1:
            raise DomainError(f"columns have differing lengths {sorted(lengths)}")
        values = np.column_stack([np.asarray(columns[k], dtype=float) for k in names]) \
            if names else np.empty((0, 0))
        if masks is None:
            mask = np.isfinite(values)
        else:
            mask = np.column_stack([
                np.asarray(masks[k], dtype=bool) if k in masks
                else np.isfinite(np.asarray(columns[k], dtype=float))
                for k in names])
        return cls(names, values, mask)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def col_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DomainError(f"no column named {name!r}; have {list(self.names)}") from None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.col_index(name)]

    def column_mask(self, name: str) -> np.ndarray:
        return self.mask[:, self.col_index(name)]

    def series(self, name: str) -> TimeSeries:
        j = self.col_index(name)
        return TimeSeries(self.values[:, j], self.mask[:, j])

    def with_column(self, name: str, values, mask=None) -> "DataMatrix":
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_rows,):
            raise DomainError(f"column {name!r} has length {values.size}, expected {self.n_rows}")
        mask = np.isfinite(values) if mask is None else np.asarray(mask, dtype=bool)
        if name in self.names:
            j = self.col_index(name)
            v, m = self.values.copy(), self.mask.copy()
            v[:, j], m[:, j] = values, mask
            return DataMatrix(self.names, v, m)
        return DataMatrix(self.names + (name,),
                          np.column_stack([self.values, values]),
                          np.column_stack([self.mask, mask]))


def format_float(x: float) -> str:
    # repr is the shortest string that round-trips exactly
    return repr(float(x))


def _parse_cell(token: str, line: int, col: str) -> float:
    try:
        x = float(token)
    except ValueError:
        raise ParseError(f"line {line}: non-numeric value {token!r} in column {col!r}") from None
    if not np.isfinite(x):
        raise ParseError(f"line {line}: non-finite value {token!r} in column {col!r}")
    return x


def read_csv_text(text: str) -> DataMatrix:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("line 1: missing header row") from None
    header = [h.strip() for h in header]
    if not header or any(h == "" for h in header):
        raise ParseError("line 1: empty column name in header")
    p = len(header)
    rows, masks = [], []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != p:
            raise ParseError(f"line {line}: expected {p} fields, found {len(row)}")
        vals, obs = [], []
        for token, name in zip(row, header):
            token = token.strip()
            if token == "":
                vals.append(np.nan)
                obs.append(False)
            else:
                vals.append(_parse_cell(token, line, name))
                obs.append(True)
        rows.append(vals)
        masks.append(obs)
    values = np.array(rows, dtype=float).reshape(len(rows), p)
    mask = np.array(masks, dtype=bool).reshape(len(rows), p)
    try:
        return DataMatrix(tuple(header), values, mask)
    except DomainError as exc:
        raise ParseError(f"line 1: {exc}") from None


def read_csv(path) -> DataMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        return read_csv_text(fh.read())


def csv_text(matrix: DataMatrix) -> str:
    out = [",".join(matrix.names)]
    for vals, obs in zip(matrix.values.tolist(), matrix.mask.tolist()):
        out.append(",".join(format_float(v) if o else "" for v, o in zip(vals, obs)))
    return "\n".join(out) + "\n"


def rows_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Render already-formatted rows as LF-terminated CSV."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def atomic_write_text(path, text: str) -> Path:
    """Write ``text`` to ``path`` via a temporary sibling and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_csv(matrix: DataMatrix, path) -> Path:
    return atomic_write_text(path, csv_text(matrix))
