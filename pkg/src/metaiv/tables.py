"""Delimited-text interchange formats.

All tables are UTF-8 comma-separated with a header row. Floats are written
with ``repr`` so a write/read round trip reproduces every value bit for
bit. Parse errors name the file, line, and column that violated the rule.

Formats:
  group summary   group_id,n,is_control,x1..xd,y
  raw units       group_id,x1..xd,y
  covariance      one header line ``dim=<d+1>`` then d+1 rows of d+1 values
  effect matrix   z1..zd header then one row per group
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .crossval import RawUnitData
from .errors import FileDimensionMismatch, FileFormatError
from .model import GroupSummary, MetaDataset, NoiseModel

_TRUE = {"1", "true", "t", "yes"}
_FALSE = {"0", "false", "f", "no"}


def _fmt(v: float) -> str:
    return repr(float(v))


def _parse_float(raw: str, path, line: int, col: str) -> float:
    try:
        v = float(raw)
    except ValueError:
        raise FileFormatError("not a number", file=str(path), line=line, column=col,
                              value=raw)
    if not np.isfinite(v):
        raise FileFormatError("values must be finite", file=str(path), line=line,
                              column=col, value=raw)
    return v


def _parse_bool(raw: str, path, line: int, col: str) -> bool:
    s = raw.strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise FileFormatError("not a boolean", file=str(path), line=line, column=col,
                          value=raw)


def _open_reader(path):
    try:
        return open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise FileFormatError(f"cannot read file: {exc}", file=str(path))


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_group_table(path, data: MetaDataset) -> None:
    header = ["group_id", "n", "is_control"] + [f"x{j + 1}" for j in range(data.dim)] + ["y"]
    rows = (
        [str(g.group_id), str(g.n_units), "1" if g.is_control else "0"]
        + [_fmt(v) for v in g.x_mean] + [_fmt(g.y_mean)]
        for g in data.groups
    )
    write_rows(path, header, rows)


def read_group_table(path) -> MetaDataset:
    path = Path(path)
    with _open_reader(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError("empty file", file=str(path))
        header = [h.strip() for h in header]
        if len(header) < 5 or header[:3] != ["group_id", "n", "is_control"] or header[-1] != "y":
            raise FileFormatError(
                "header must be group_id,n,is_control,x1..xd,y",
                file=str(path), header=",".join(header))
        d = len(header) - 4
        for j in range(d):
            if header[3 + j] != f"x{j + 1}":
                raise FileFormatError("x columns must be named x1..xd in order",
                                      file=str(path), column=header[3 + j])
        groups = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FileFormatError("wrong number of fields", file=str(path),
                                      line=line, expected=len(header), got=len(row))
            gid = row[0].strip()
            if not gid:
                raise FileFormatError("empty group_id", file=str(path), line=line)
            try:
                n = int(row[1])
            except ValueError:
                raise FileFormatError("n must be an integer", file=str(path),
                                      line=line, value=row[1])
            ctrl = _parse_bool(row[2], path, line, "is_control")
            x = np.array([_parse_float(row[3 + j], path, line, f"x{j + 1}")
                          for j in range(d)])
            y = _parse_float(row[-1], path, line, "y")
            groups.append(GroupSummary(group_id=gid, n_units=n, x_mean=x,
                                       y_mean=y, is_control=ctrl))
    if not groups:
        raise FileFormatError("no data rows", file=str(path))
    return MetaDataset.from_groups(groups)


def write_raw_table(path, raw: RawUnitData) -> None:
    d = raw.dim
    header = ["group_id"] + [f"x{j + 1}" for j in range(d)] + ["y"]
    rows = (
        [str(raw.group_ids[i])] + [_fmt(v) for v in raw.x[i]] + [_fmt(raw.y[i])]
        for i in range(raw.n_rows)
    )
    write_rows(path, header, rows)


def read_raw_table(path) -> RawUnitData:
    path = Path(path)
    with _open_reader(path) as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError("empty file", file=str(path))
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0] != "group_id" or header[-1] != "y":
            raise FileFormatError("header must be group_id,x1..xd,y",
                                  file=str(path), header=",".join(header))
        d = len(header) - 2
        ids, xs, ys = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FileFormatError("wrong number of fields", file=str(path),
                                      line=line, expected=len(header), got=len(row))
            ids.append(row[0].strip())
            xs.append([_parse_float(row[1 + j], path, line, f"x{j + 1}") for j in range(d)])
            ys.append(_parse_float(row[-1], path, line, "y"))
    if not ids:
        raise FileFormatError("no data rows", file=str(path))
    return RawUnitData(x=np.array(xs), y=np.array(ys),
                       group_ids=np.array(ids, dtype=object))


def write_cov_file(path, cov: np.ndarray | NoiseModel) -> None:
    mat = cov.tau if isinstance(cov, NoiseModel) else np.asarray(cov, dtype=float)
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"dim={mat.shape[0]}\n")
        for row in mat:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_cov_file(path) -> np.ndarray:
    path = Path(path)
    with _open_reader(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("dim="):
            raise FileFormatError("covariance file must start with dim=<d+1>",
                                  file=str(path), line=1)
        try:
            dim = int(first[4:])
        except ValueError:
            raise FileFormatError("bad dimension header", file=str(path), line=1,
                                  value=first)
        if dim < 1:
            raise FileDimensionMismatch("dimension must be positive", file=str(path),
                                        dim=dim)
        rows = []
        for line, text in enumerate(fh, start=2):
            text = text.strip()
            if not text:
                continue
            parts = text.split(",")
            if len(parts) != dim:
                raise FileDimensionMismatch("wrong row length", file=str(path),
                                            line=line, expected=dim, got=len(parts))
            rows.append([_parse_float(p, path, line, f"col{j + 1}")
                         for j, p in enumerate(parts)])
    if len(rows) != dim:
        raise FileDimensionMismatch("wrong number of rows", file=str(path),
                                    expected=dim, got=len(rows))
    return np.array(rows)


def write_matrix_table(path, mat: np.ndarray, prefix: str = "z") -> None:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    header = [f"{prefix}{j + 1}" for j in range(mat.shape[1])]
    write_rows(path, header, ([_fmt(v) for v in row] for row in mat))


def read_matrix_table(path) -> np.ndarray:
    """Read a table of numeric row vectors; a non-numeric first line is
    treated as a header."""
    path = Path(path)
    with _open_reader(path) as fh:
        reader = csv.reader(fh)
        rows = []
        width = None
        for line, row in enumerate(reader, start=1):
            if not row:
                continue
            if line == 1:
                try:
                    [float(v) for v in row]
                except ValueError:
                    continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FileDimensionMismatch("wrong row length", file=str(path),
                                            line=line, expected=width, got=len(row))
            rows.append([_parse_float(v, path, line, f"col{j + 1}")
                         for j, v in enumerate(row)])
    if not rows:
        raise FileFormatError("no data rows", file=str(path))
    return np.array(rows)
