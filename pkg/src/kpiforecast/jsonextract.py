"""Key-based extraction of KPI series from JSON telemetry logs.

Parsed dictionaries are kept as :class:`JsonObject` (an ordered list of
``(key, value)`` pairs) so that document order and duplicate keys survive
the parse. Extraction also accepts plain ``dict`` trees, which is what the
synthetic generator produces before serialization.

Missing values are represented by ``NaN`` inside float64 arrays.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Sequence, Union

import numpy as np

from .errors import DepthExceeded, EmptySeries, MalformedJSON

DEFAULT_MAX_DEPTH = 256

_STRING_RE = re.compile(r'"(?:[^"\\]|\\.)*"', re.DOTALL)
_DECIMAL_RE = re.compile(r"^\s*[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?\s*$")

MISSING = float("nan")


class JsonObject(list):
    """A JSON dictionary as an ordered list of ``(key, value)`` pairs.

    Duplicate keys are retained in document order.
    """

    def keys(self):
        return [k for k, _ in self]

    def get(self, key, default=None):
        for k, v in self:
            if k == key:
                return v
        return default

    def to_python(self):
        """Convert to plain ``dict``/``list`` (last duplicate wins)."""
        return {k: _to_python(v) for k, v in self}

    def __repr__(self):
        return f"JsonObject({list.__repr__(self)})"


def _to_python(node):
    if isinstance(node, JsonObject):
        return node.to_python()
    if isinstance(node, list):
        return [_to_python(v) for v in node]
    return node


JsonNode = Union[JsonObject, dict, list, float, int, str, bool, None]


def max_nesting_depth(text: str) -> int:
    """Deepest container nesting in a JSON text (strings are ignored)."""
    stripped = _STRING_RE.sub('""', text)
    buf = np.frombuffer(stripped.encode("utf-8"), dtype=np.uint8)
    if buf.size == 0:
        return 0
    step = np.zeros(buf.shape, dtype=np.int64)
    step[(buf == ord("[")) | (buf == ord("{"))] = 1
    step[(buf == ord("]")) | (buf == ord("}"))] = -1
    return int(max(0, np.cumsum(step).max()))


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as f:
            return f.read()
    data = source.read()
    return data.encode("utf-8") if isinstance(data, str) else data


def load_document(source: Union[str, os.PathLike, bytes, BinaryIO],
                  max_depth: int = DEFAULT_MAX_DEPTH) -> JsonNode:
    """Parse a JSON document, preserving dictionary order and duplicate keys.

    Parameters
    ----------
    source
        File path, raw bytes, or a binary (or text) stream.
    max_depth
        Maximum container nesting; deeper documents raise ``DepthExceeded``.

    Raises
    ------
    OSError
        If the file cannot be read.
    MalformedJSON
        With byte offset, line and column of the first error.
    DepthExceeded
        If nesting exceeds ``max_depth``.
    """
    raw = _read_bytes(source)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        col = exc.start - (raw.rfind(b"\n", 0, exc.start) + 1) + 1
        raise MalformedJSON("invalid UTF-8", exc.start, line, col) from None
    offset = 0
    if text.startswith("\ufeff"):
        text = text[1:]
        offset = 3

    depth = max_nesting_depth(text)
    if depth > max_depth:
        raise DepthExceeded(f"document nesting depth {depth} exceeds limit {max_depth}")

    try:
        return json.loads(text, object_pairs_hook=JsonObject)
    except json.JSONDecodeError as exc:
        byte_offset = offset + len(text[: exc.pos].encode("utf-8"))
        raise MalformedJSON(exc.msg, byte_offset, exc.lineno, exc.colno) from None


def _items(node) -> Iterator:
    if isinstance(node, JsonObject):
        return iter(node)
    return iter(node.items())


def iter_key(tree: JsonNode, key: str) -> Iterator[JsonNode]:
    """Yield values stored under ``key`` in depth-first encounter order.

    A matched value is yielded before anything nested inside it, and the
    traversal then continues into the matched value.
    """
    stack = [iter((tree,))]
    while stack:
        try:
            node = next(stack[-1])
        except StopIteration:
            stack.pop()
            continue
        if isinstance(node, tuple):
            k, node = node
            if k == key:
                yield node
        if isinstance(node, (JsonObject, dict)):
            stack.append(_items(node))
        elif isinstance(node, list):
            stack.append(iter(node))


def extract_key(tree: JsonNode, key: str) -> list:
    """All values associated with ``key``, in depth-first encounter order."""
    return list(iter_key(tree, key))


def coerce_number(value) -> float:
    """Total numeric coercion; returns NaN when the value is not numeric.

    Booleans map to 1.0/0.0, decimal strings are parsed, non-finite
    numbers and containers/null become Missing.
    """
    if isinstance(value, bool):
        return 1.0 if value else 0.0
    if isinstance(value, (int, float)):
        x = float(value)
        return x if math.isfinite(x) else MISSING
    if isinstance(value, str) and _DECIMAL_RE.match(value):
        x = float(value)
        return x if math.isfinite(x) else MISSING
    return MISSING


@dataclass
class RaggedSeries:
    """Per-record numeric vectors of possibly different lengths."""

    rows: list = field(default_factory=list)
    n_uncoercible: int = 0

    @property
    def lengths(self) -> list:
        return [len(r) for r in self.rows]

    def __len__(self):
        return len(self.rows)


def extract_two_layer(tree: JsonNode, k1: str, k2: str) -> RaggedSeries:
    """Extract ``k2`` values inside every subtree found under ``k1``.

    Each row holds the coerced ``k2`` values of one ``k1`` match. Values that
    cannot be coerced become NaN and are counted in ``n_uncoercible``.
    """
    rows = []
    bad = 0
    for sub in iter_key(tree, k1):
        vals = [coerce_number(v) for v in iter_key(sub, k2)]
        arr = np.array(vals, dtype=np.float64)
        bad += int(np.isnan(arr).sum())
        rows.append(arr)
    return RaggedSeries(rows=rows, n_uncoercible=bad)


@dataclass
class KpiTable:
    """m x L float64 matrix with NaN as the Missing marker."""

    data: np.ndarray
    column_names: tuple | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"KpiTable data must be 2-D, got shape {self.data.shape}")
        if self.column_names is not None:
            self.column_names = tuple(self.column_names)
            if len(self.column_names) != self.data.shape[1]:
                raise ValueError("column_names length does not match column count")

    @property
    def shape(self):
        return self.data.shape

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.data)

    def equals(self, other: "KpiTable") -> bool:
        """Bit-exact equality, with Missing equal to Missing."""
        if self.column_names != other.column_names or self.shape != other.shape:
            return False
        a, b = self.data, other.data
        nan_a, nan_b = np.isnan(a), np.isnan(b)
        if not np.array_equal(nan_a, nan_b):
            return False
        return a[~nan_a].tobytes() == b[~nan_b].tobytes()


def pad_stack(series: RaggedSeries | Sequence, column_names=None) -> KpiTable:
    """Right-pad every row with Missing to the longest row and stack."""
    rows = series.rows if isinstance(series, RaggedSeries) else list(series)
    if len(rows) == 0:
        raise EmptySeries("cannot tabularize an empty series (no rows)")
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), np.nan)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return KpiTable(out, column_names)


def default_column_names(key: str, width: int) -> tuple:
    if width == 1:
        return (key,)
    return tuple(f"{key}_{j}" for j in range(width))


def extract_table(tree: JsonNode, k1: str, keys: Sequence[str]) -> tuple[KpiTable, int]:
    """Two-layer extraction for several ``k2`` keys, stacked column-wise.

    Returns the table and the total number of uncoercible values.
    """
    blocks, names, bad = [], [], 0
    for k2 in keys:
        series = extract_two_layer(tree, k1, k2)
        table = pad_stack(series)
        blocks.append(table.data)
        names.extend(default_column_names(k2, table.shape[1]))
        bad += series.n_uncoercible
    return KpiTable(np.hstack(blocks), tuple(names)), bad


def _format_value(x: float) -> str:
    if math.isnan(x):
        return ""
    if x == 0.0:
        return "-0" if math.copysign(1.0, x) < 0 else "0"
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def export_csv(table: KpiTable, path) -> None:
    """Write the table as CSV; Missing becomes an empty field."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(table_to_csv_text(table))


def _is_number(field_: str) -> bool:
    return field_ == "" or _DECIMAL_RE.match(field_) is not None


def import_csv(path, header: bool | None = None) -> KpiTable:
    """Read a CSV written by :func:`export_csv`.

    With ``header=None`` the first row is treated as a header when any of
    its fields is non-numeric.
    """
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    names = None
    if rows and (header or (header is None and not all(_is_number(x) for x in rows[0]))):
        names = tuple(rows[0])
        rows = rows[1:]
    width = len(names) if names is not None else (len(rows[0]) if rows else 0)
    data = np.full((len(rows), width), np.nan)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i + 1} has {len(row)} fields, expected {width}")
        for j, x in enumerate(row):
            if x != "":
                data[i, j] = float(x)
    return KpiTable(data, names)


def table_to_csv_text(table: KpiTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if table.column_names is not None:
        w.writerow(table.column_names)
    for row in table.data:
        w.writerow([_format_value(float(x)) for x in row])
    return buf.getvalue()
