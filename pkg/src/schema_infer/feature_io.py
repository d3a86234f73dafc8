"""Binary container for backbone token exports (magic ``SNFX``).

Layout, all little-endian:

    header:  magic "SNFX" | version u32 | n u32 | zeta u32 | d u32
             | grid_h u32 | grid_w u32 | layer_index u32 | record_count u32
    record:  image_id u64 | label u32
             | X     float32[(n+zeta) * d]      row-major, aux rows first
             | attn  float32[(n+zeta)^2]        row-major, rows sum to 1

Aux-token ordering is fixed: row 0 is the classification token, row 1 (when
zeta = 2) the distillation token. This file is the one wire contract between
the exporter and this engine, so both sides must produce identical bytes for
identical content.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

MAGIC = b"SNFX"
VERSION = 1
ATTN_ROW_SUM_TOL = 1e-3


class FormatError(Exception):
    """File does not follow the declared binary layout."""


class ValidationError(Exception):
    """File parses but violates a content invariant."""


@dataclass
class DatasetHeader:
    n: int
    zeta: int
    d: int
    grid_h: int
    grid_w: int
    layer_index: int
    record_count: int
    version: int = VERSION

    def __post_init__(self):
        if self.n != self.grid_h * self.grid_w:
            raise ValidationError(f"n={self.n} must equal grid_h*grid_w={self.grid_h * self.grid_w}")
        if self.zeta not in (1, 2):
            raise ValidationError(f"zeta must be 1 or 2, got {self.zeta}")

    @property
    def tokens(self) -> int:
        return self.n + self.zeta


@dataclass
class FeatureRecord:
    """One image's backbone output. X and attn are float32, the disk dtype.

    visual_positions maps each visual row of X to its original grid index;
    None means the identity mapping (the only state that is ever written to
    disk). Perturbation produces in-memory records with a sparse mapping.
    """

    image_id: int
    label: int
    X: np.ndarray
    attn: np.ndarray
    zeta: int
    grid_h: int
    grid_w: int
    visual_positions: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0] - self.zeta

    def positions(self) -> np.ndarray:
        if self.visual_positions is not None:
            return self.visual_positions
        return np.arange(self.n, dtype=np.int64)


_HEADER_STRUCT = struct.Struct("<8I")
_RECORD_PREFIX = struct.Struct("<QI")
HEADER_SIZE = 4 + _HEADER_STRUCT.size


def record_nbytes(header: DatasetHeader) -> int:
    t = header.tokens
    return _RECORD_PREFIX.size + 4 * t * header.d + 4 * t * t


def _read_exact(f: BinaryIO, nbytes: int, what: str) -> bytes:
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise FormatError(f"truncated file: expected {nbytes} bytes for {what}, got {len(data)}")
    return data


def write_header(f: BinaryIO, header: DatasetHeader) -> None:
    f.write(MAGIC)
    f.write(
        _HEADER_STRUCT.pack(
            header.version,
            header.n,
            header.zeta,
            header.d,
            header.grid_h,
            header.grid_w,
            header.layer_index,
            header.record_count,
        )
    )


def read_header(f: BinaryIO) -> DatasetHeader:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, n, zeta, d, gh, gw, layer, count = _HEADER_STRUCT.unpack(_read_exact(f, _HEADER_STRUCT.size, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    return DatasetHeader(n=n, zeta=zeta, d=d, grid_h=gh, grid_w=gw, layer_index=layer, record_count=count, version=version)


def write_dataset(path, header: DatasetHeader, records: Iterable[FeatureRecord]) -> None:
    """Write header then records, float32 row-major payloads, in stream order."""
    t = header.tokens
    written = 0
    with open(path, "wb") as f:
        write_header(f, header)
        for rec in records:
            if rec.X.shape != (t, header.d):
                raise ValidationError(
                    f"record {rec.image_id}: X shape {rec.X.shape} != ({t}, {header.d})"
                )
            if rec.attn.shape != (t, t):
                raise ValidationError(
                    f"record {rec.image_id}: attn shape {rec.attn.shape} != ({t}, {t})"
                )
            if rec.visual_positions is not None:
                raise ValidationError(
                    f"record {rec.image_id}: perturbed records (sparse positions) are not writable"
                )
            f.write(_RECORD_PREFIX.pack(rec.image_id, rec.label))
            f.write(np.ascontiguousarray(rec.X, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(rec.attn, dtype="<f4").tobytes())
            written += 1
    if written != header.record_count:
        raise ValidationError(f"header declares {header.record_count} records, stream had {written}")


def _validate_record(rec: FeatureRecord) -> None:
    if not np.isfinite(rec.X).all():
        raise ValidationError(f"record {rec.image_id}: non-finite token embedding")
    if not np.isfinite(rec.attn).all():
        raise ValidationError(f"record {rec.image_id}: non-finite attention value")
    sums = rec.attn.sum(axis=1, dtype=np.float64)
    bad = np.abs(sums - 1.0) > ATTN_ROW_SUM_TOL
    if bad.any():
        row = int(np.argmax(bad))
        raise ValidationError(
            f"record {rec.image_id}: attention row {row} sums to {sums[row]:.6f}, expected 1"
        )


def read_records(f: BinaryIO, header: DatasetHeader, validate: bool = True) -> Iterator[FeatureRecord]:
    t = header.tokens
    for _ in range(header.record_count):
        image_id, label = _RECORD_PREFIX.unpack(_read_exact(f, _RECORD_PREFIX.size, "record prefix"))
        x_bytes = _read_exact(f, 4 * t * header.d, f"X of record {image_id}")
        a_bytes = _read_exact(f, 4 * t * t, f"attn of record {image_id}")
        rec = FeatureRecord(
            image_id=image_id,
            label=label,
            X=np.frombuffer(x_bytes, dtype="<f4").reshape(t, header.d).copy(),
            attn=np.frombuffer(a_bytes, dtype="<f4").reshape(t, t).copy(),
            zeta=header.zeta,
            grid_h=header.grid_h,
            grid_w=header.grid_w,
        )
        if validate:
            _validate_record(rec)
        yield rec


def read_dataset(path, validate: bool = True) -> tuple[DatasetHeader, Iterator[FeatureRecord]]:
    """Open an SNFX file; returns the header and a single-consumer record iterator.

    Records are validated as they stream: finiteness and attention row sums
    (within 1e-3, the float32 export tolerance). The iterator holds one record
    in memory at a time and closes the file when exhausted.
    """
    f = open(path, "rb")
    try:
        header = read_header(f)
    except Exception:
        f.close()
        raise

    def _iter():
        try:
            yield from read_records(f, header, validate=validate)
        finally:
            f.close()

    return header, _iter()


def load_records(path, validate: bool = True) -> tuple[DatasetHeader, list[FeatureRecord]]:
    header, it = read_dataset(path, validate=validate)
    return header, list(it)
