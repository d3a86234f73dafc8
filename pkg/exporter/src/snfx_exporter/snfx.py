"""SNFX wire format, exporter side.

This is an independent implementation of the same byte layout the inference
engine reads; the format is the contract between the two packages, so both
sides implement it bit-exactly.

    header:  magic "SNFX" | version u32 | n u32 | zeta u32 | d u32
             | grid_h u32 | grid_w u32 | layer_index u32 | record_count u32
    record:  image_id u64 | label u32
             | X     float32[(n+zeta) * d]   row-major, CLS row first, DIST second
             | attn  float32[(n+zeta)^2]     row-major, rows sum to 1

All integers little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

MAGIC = b"SNFX"
VERSION = 1

_HEADER = struct.Struct("<8I")
_PREFIX = struct.Struct("<QI")
HEADER_SIZE = 4 + _HEADER.size


class SnfxError(Exception):
    pass


@dataclass
class Header:
    n: int
    zeta: int
    d: int
    grid_h: int
    grid_w: int
    layer_index: int
    record_count: int
    version: int = VERSION

    @property
    def tokens(self) -> int:
        return self.n + self.zeta


@dataclass
class Record:
    image_id: int
    label: int
    X: np.ndarray  # (n+zeta, d) float32
    attn: np.ndarray  # (n+zeta, n+zeta) float32


def _need(f: BinaryIO, nbytes: int, what: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise SnfxError(f"truncated file reading {what}")
    return data


def write(path, header: Header, records: Iterable[Record]) -> None:
    t = header.tokens
    count = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(
            _HEADER.pack(
                header.version, header.n, header.zeta, header.d,
                header.grid_h, header.grid_w, header.layer_index, header.record_count,
            )
        )
        for rec in records:
            if rec.X.shape != (t, header.d) or rec.attn.shape != (t, t):
                raise SnfxError(
                    f"record {rec.image_id}: shapes {rec.X.shape}/{rec.attn.shape} "
                    f"do not match header ({t}, {header.d})"
                )
            f.write(_PREFIX.pack(rec.image_id, rec.label))
            f.write(np.ascontiguousarray(rec.X, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(rec.attn, dtype="<f4").tobytes())
            count += 1
    if count != header.record_count:
        raise SnfxError(f"header declares {header.record_count} records, wrote {count}")


def read(path) -> tuple[Header, Iterator[Record]]:
    f = open(path, "rb")
    try:
        if _need(f, 4, "magic") != MAGIC:
            raise SnfxError("bad magic")
        fields = _HEADER.unpack(_need(f, _HEADER.size, "header"))
        header = Header(
            version=fields[0], n=fields[1], zeta=fields[2], d=fields[3],
            grid_h=fields[4], grid_w=fields[5], layer_index=fields[6], record_count=fields[7],
        )
        if header.version != VERSION:
            raise SnfxError(f"unsupported version {header.version}")
    except Exception:
        f.close()
        raise

    def _iter():
        t = header.tokens
        try:
            for _ in range(header.record_count):
                image_id, label = _PREFIX.unpack(_need(f, _PREFIX.size, "record prefix"))
                x = np.frombuffer(_need(f, 4 * t * header.d, "X"), dtype="<f4").reshape(t, header.d)
                a = np.frombuffer(_need(f, 4 * t * t, "attn"), dtype="<f4").reshape(t, t)
                yield Record(image_id=image_id, label=label, X=x.copy(), attn=a.copy())
        finally:
            f.close()

    return header, _iter()
