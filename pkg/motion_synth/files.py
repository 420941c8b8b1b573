"""
Versioned structured-text tables.

Every file starts with a header line ``# <format-tag>`` followed by
tab-separated ``key=value`` metadata; the body is a tab-separated table
written by pandas. Floats are written in their shortest round-trip form
and read back with ``float_precision='round_trip'`` so that
write -> read -> write is byte-identical.
"""
import re
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Tuple

import pandas as pd

logger = logging.getLogger(__name__)

_PARSER_LINE = re.compile(r"line (\d+)")


class FileFormatError(ValueError):
    def __init__(self, path, line, column, message):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{path}:{line}:{column}: {message}")


def write_table(path, tag: str, frame: pd.DataFrame, **meta):
    header = "\t".join([f"# {tag}"] + [f"{k}={v}" for k, v in meta.items()])
    path = Path(path)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(header + "\n")
        frame.to_csv(f, sep='\t', index=False, lineterminator='\n')
    logger.debug("wrote %s (%d rows) to %s", tag, len(frame), path)
    return path


def peek_tag(path) -> str:
    with open(path, 'r', encoding='utf-8') as f:
        header = f.readline().rstrip("\n")
    if not header.startswith("# "):
        raise FileFormatError(path, 1, 1, "missing '# <format>' header")
    return header[2:].split("\t")[0]


def read_header(path, tag: str, required: Iterable[str] = ()) -> Dict[str, str]:
    with open(path, 'r', encoding='utf-8') as f:
        header = f.readline().rstrip("\n")

    if not header.startswith("# "):
        raise FileFormatError(path, 1, 1, "missing '# <format>' header")
    fields = header.split("\t")
    found = fields[0][2:]
    if found != tag:
        raise FileFormatError(
            path, 1, 3, f"expected format {tag!r}, found {found!r}")

    meta = {}
    column = len(fields[0]) + 2
    for field in fields[1:]:
        key, sep, value = field.partition("=")
        if not sep or not key:
            raise FileFormatError(
                path, 1, column, f"malformed metadata field {field!r}")
        meta[key] = value
        column += len(field) + 1

    for key in required:
        if key not in meta:
            raise FileFormatError(
                path, 1, len(header) + 1, f"missing metadata key {key!r}")
    return meta


def read_table(path, tag: str, required: Iterable[str] = ()) -> Tuple[Dict[str, str], pd.DataFrame]:
    meta = read_header(path, tag, required)
    try:
        frame = pd.read_csv(
            path, sep='\t', skiprows=1, float_precision='round_trip')
    except pd.errors.EmptyDataError:
        raise FileFormatError(path, 2, 1, "empty table") from None
    except pd.errors.ParserError as err:
        match = _PARSER_LINE.search(str(err))
        line = int(match.group(1)) + 1 if match else 2
        raise FileFormatError(path, line, 1, str(err).strip()) from None
    return meta, frame


def meta_value(path, meta, key, kind=float):
    try:
        return kind(meta[key])
    except (KeyError, ValueError):
        raise FileFormatError(
            path, 1, 1, f"metadata {key!r} must be {kind.__name__}, "
            f"got {meta.get(key)!r}") from None


def require_columns(path, frame: pd.DataFrame, columns: Iterable[str], numeric=True):
    columns = list(columns)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise FileFormatError(
            path, 2, len(frame.columns) + 1, f"missing columns {missing}")
    for c in columns:
        if not numeric or frame[c].dtype.kind in 'fi':
            continue
        bad = pd.to_numeric(frame[c], errors='coerce').isna() & frame[c].notna()
        if bad.any():
            row = int(bad.to_numpy().nonzero()[0][0])
            raise FileFormatError(
                path, row + 3, list(frame.columns).index(c) + 1,
                f"non-numeric value {frame[c].iloc[row]!r} in column {c!r}")


def write_json(path, obj):
    path = Path(path)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as err:
            raise FileFormatError(path, err.lineno, err.colno, err.msg) from None
