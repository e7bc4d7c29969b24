"""Run-directory file formats.

masks.bin (little-endian)::

    8 bytes   magic b"PDPMASK1"
    u32       layer count
    per layer:
      u16     name length, then UTF-8 name
      u8      ndim, then ndim x u32 extents
      bytes   ceil(n / 8) bytes of np.packbits(mask != 0, bitorder="little")

weights.bin uses the same header layout with magic b"PDPWGT01"; after the
extents each entry carries a u8 dtype code (0 float32, 1 float64) and the
raw little-endian values.

metrics.ndjson holds one JSON object per line, appended and flushed as
each epoch ends so an aborted run keeps what it finished.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping

import numpy as np

from .errors import FormatError

MASK_MAGIC = b"PDPMASK1"
WEIGHT_MAGIC = b"PDPWGT01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

CONFIG_FILE = "config.snapshot"
METRICS_FILE = "metrics.ndjson"
MASKS_FILE = "masks.bin"
WEIGHTS_FILE = "weights.bin"
SUMMARY_FILE = "summary.txt"


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _header(name: str, shape) -> bytes:
    encoded = name.encode("utf-8")
    return (struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", len(shape)) +
            struct.pack(f"<{len(shape)}I", *shape))


def _read_header(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode("utf-8")
    (ndim,) = r.unpack("<B")
    shape = r.unpack(f"<{ndim}I") if ndim else ()
    return name, tuple(shape)


def _read_file(path, magic: bytes) -> _Reader:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    r = _Reader(raw, path)
    if r.take(len(magic)) != magic:
        raise FormatError(f"{path}: bad magic")
    return r


def write_masks(path, masks: Mapping[str, np.ndarray]) -> None:
    parts = [MASK_MAGIC, struct.pack("<I", len(masks))]
    for name, mask in masks.items():
        mask = np.asarray(mask)
        parts.append(_header(name, mask.shape))
        parts.append(np.packbits(mask.reshape(-1) != 0, bitorder="little").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_masks(path) -> Dict[str, np.ndarray]:
    r = _read_file(path, MASK_MAGIC)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        name, shape = _read_header(r)
        n = int(np.prod(shape))
        bits = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
        out[name] = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(shape)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: trailing bytes")
    return out


def write_weights(path, state: Mapping[str, np.ndarray]) -> None:
    parts = [WEIGHT_MAGIC, struct.pack("<I", len(state))]
    for name, value in state.items():
        value = np.asarray(value)
        code = _CODES.get(value.dtype, 1)
        parts.append(_header(name, value.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path) -> Dict[str, np.ndarray]:
    r = _read_file(path, WEIGHT_MAGIC)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        name, shape = _read_header(r)
        (code,) = r.unpack("<B")
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(shape))
        out[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: trailing bytes")
    return out


class MetricsWriter:
    """Append-only NDJSON sink; each record is flushed immediately."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "a", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, allow_nan=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> List[dict]:
    records = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            raise FormatError(f"{path}:{i}: not a JSON record") from None
    return records


_LAYER_COLUMNS = ["n", "zeros", "sparsity", "allocated", "mac", "dense_mac"]


def write_summary(path, summary: Mapping) -> None:
    lines = ["# pdprune run summary"]
    for key, value in summary.items():
        if key != "layers":
            lines.append(f"{key}: {value}")
    lines.append("")
    lines.append("[layers]")
    lines.append("\t".join(["layer"] + _LAYER_COLUMNS))
    for name, row in summary.get("layers", {}).items():
        lines.append("\t".join([name] + [str(row.get(c, "")) for c in _LAYER_COLUMNS]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_summary(path) -> dict:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    if not lines or not lines[0].startswith("# pdprune"):
        raise FormatError(f"{path}: not a run summary")
    out: dict = {"layers": {}}
    section = None
    header: List[str] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        if line == "[layers]":
            section = "layers"
            continue
        if section == "layers":
            cells = line.split("\t")
            if not header:
                header = cells
                continue
            if len(cells) != len(header):
                raise FormatError(f"{path}: malformed layer row {line!r}")
            out["layers"][cells[0]] = {k: _scalar(v) for k, v in zip(header[1:], cells[1:])}
        else:
            key, sep, value = line.partition(": ")
            if not sep:
                raise FormatError(f"{path}: malformed line {line!r}")
            out[key] = _scalar(value)
    return out


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow(list(row))
