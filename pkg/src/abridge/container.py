"""Single-file chunked array container.

File layout (integers little-endian):

    [0..8)    b"ABRG0001"
    [8..16)   reserved zeros
    [16..M)   chunk data extents, append-only
    [M..)     metadata document, UTF-8 JSON
              8-byte metadata byte length
              b"ABRGEND1"   (the final 8 bytes of the file)

The footer is the sole metadata authority; a reader locates it from the end
of the file. Its document is canonical JSON (sorted keys, compact
separators) so identical container states yield identical bytes:

    {"datasets": {"<path>": {
        "kind": "stored" | "virtual",
        "dtype": "f64" | "f32" | "i64" | "i32",
        "shape": [...], "chunk_shape": [...], "fill": <number>,
        "chunks": {"<c0,c1,...>": [offset, length]},
        "mappings": [{"file": ..., "dataset": ...,
                      "src": {"start": [...], "count": [...]},
                      "dst": {"start": [...], "count": [...]}}]}}}

Groups are implicit in the slash-separated dataset paths. Chunk cells are
raw dense row-major little-endian values; edge chunks are stored padded to
the full chunk shape and clipped on read. Rewriting a chunk appends a fresh
extent and repoints the index; dead extents are never reclaimed.

A write-mode handle keeps the *committed* footer valid at the tail of the
file at all times: every chunk append overwrites it and re-appends it after
the new extent, under the exclusive footer latch, so a reader may open the
file at any instant and sees exactly the last committed state. ``commit``
swaps the footer content the same way and fsyncs, which makes the publish
atomic for readers and leaves one single footer in the file.
"""

import json
import os
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from itertools import product

import numpy as np

from .errors import (
    AbridgeError,
    BadMagicError,
    CorruptionError,
    CyclicReferenceError,
    DatasetExistsError,
    DatasetNotFoundError,
    MappingOverlapError,
    MetadataParseError,
    SourceMissingError,
    TruncatedFooterError,
)
from .locking import WriterLock, default_lock_timeout, footer_latch

HEADER_MAGIC = b"ABRG0001"
END_MAGIC = b"ABRGEND1"
HEADER_SIZE = 16
SELF_FILE = "."  # mapping source living in the same container

KIND_STORED = "stored"
KIND_VIRTUAL = "virtual"


class ElementType(str, Enum):
    f64 = "f64"
    f32 = "f32"
    i64 = "i64"
    i32 = "i32"

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype({"f64": "<f8", "f32": "<f4",
                         "i64": "<i8", "i32": "<i4"}[self.value])

    @property
    def itemsize(self) -> int:
        return self.np_dtype.itemsize

    @property
    def is_float(self) -> bool:
        return self.value[0] == "f"

    def cast_fill(self, value):
        return float(value) if self.is_float else int(value)


# ---------------------------------------------------------------------------
# geometry

def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def grid_shape(shape, chunk_shape) -> tuple[int, ...]:
    """Chunk-grid extents covering `shape`."""
    return tuple(ceil_div(s, c) for s, c in zip(shape, chunk_shape))


def chunk_count(shape, chunk_shape) -> int:
    n = 1
    for g in grid_shape(shape, chunk_shape):
        n *= g
    return n


def linearize_grid(grid_coord, gshape) -> int:
    lin = 0
    for g, extent in zip(grid_coord, gshape):
        lin = lin * extent + g
    return lin


def delinearize_grid(lin: int, gshape) -> tuple[int, ...]:
    coord = []
    for extent in reversed(gshape):
        coord.append(lin % extent)
        lin //= extent
    return tuple(reversed(coord))


def iter_chunk_starts(shape, chunk_shape):
    """Aligned chunk start coordinates in row-major grid order."""
    ranges = [range(0, s, c) for s, c in zip(shape, chunk_shape)]
    yield from product(*ranges)


@dataclass(frozen=True)
class Hyperslab:
    """Axis-aligned region: per-dimension start offsets and extents."""

    start: tuple[int, ...]
    count: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "count", tuple(int(v) for v in self.count))
        if len(self.start) != len(self.count):
            raise ValueError("start and count rank differ")
        if any(c < 1 for c in self.count):
            raise ValueError("all counts must be >= 1")
        if any(s < 0 for s in self.start):
            raise ValueError("negative start offset")

    @property
    def rank(self) -> int:
        return len(self.start)

    @property
    def cells(self) -> int:
        n = 1
        for c in self.count:
            n *= c
        return n

    @property
    def end(self) -> tuple[int, ...]:
        return tuple(s + c for s, c in zip(self.start, self.count))

    def within(self, shape) -> bool:
        return (len(shape) == self.rank
                and all(e <= dim for e, dim in zip(self.end, shape)))

    def intersect(self, other: "Hyperslab"):
        start = tuple(max(a, b) for a, b in zip(self.start, other.start))
        end = tuple(min(a, b) for a, b in zip(self.end, other.end))
        if any(e <= s for s, e in zip(start, end)):
            return None
        return Hyperslab(start, tuple(e - s for s, e in zip(start, end)))

    def to_json(self) -> dict:
        return {"start": list(self.start), "count": list(self.count)}

    @staticmethod
    def from_json(doc) -> "Hyperslab":
        return Hyperslab(doc["start"], doc["count"])


def chunk_box(chunk_coord, chunk_shape, shape) -> Hyperslab:
    """The chunk's cell region clipped to the dataset's logical shape."""
    count = tuple(min(c, dim - s)
                  for s, c, dim in zip(chunk_coord, chunk_shape, shape))
    return Hyperslab(chunk_coord, count)


def chunks_intersecting(region: Hyperslab, chunk_shape):
    """Aligned start coordinates of chunks overlapping `region`, row-major."""
    ranges = []
    for s, c, ch in zip(region.start, region.count, chunk_shape):
        first = (s // ch) * ch
        last = ((s + c - 1) // ch) * ch
        ranges.append(range(first, last + 1, ch))
    yield from product(*ranges)


@dataclass(frozen=True)
class Mapping:
    """Places a source hyperslab into a virtual dataset's coordinate space.

    src and dst must have identical per-dimension counts; translation of a
    partial intersection is only well defined for congruent boxes.
    """

    source_file: str
    source_dataset: str
    src: Hyperslab
    dst: Hyperslab

    def __post_init__(self):
        if self.src.rank != self.dst.rank:
            raise ValueError("src and dst rank differ")
        if self.src.count != self.dst.count:
            raise ValueError("src and dst counts differ")

    def to_json(self) -> dict:
        return {"file": self.source_file, "dataset": self.source_dataset,
                "src": self.src.to_json(), "dst": self.dst.to_json()}

    @staticmethod
    def from_json(doc) -> "Mapping":
        return Mapping(doc["file"], doc["dataset"],
                       Hyperslab.from_json(doc["src"]),
                       Hyperslab.from_json(doc["dst"]))


@dataclass
class DatasetMeta:
    path: str
    kind: str
    dtype: ElementType
    shape: tuple[int, ...]
    fill: float | int
    chunk_shape: tuple[int, ...] | None = None
    chunks: dict[tuple[int, ...], tuple[int, int]] = field(default_factory=dict)
    mappings: list[Mapping] = field(default_factory=list)

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "dtype": self.dtype.value,
               "shape": list(self.shape), "fill": self.fill}
        if self.kind == KIND_STORED:
            doc["chunk_shape"] = list(self.chunk_shape)
            doc["chunks"] = {",".join(str(c) for c in coord): [off, length]
                             for coord, (off, length) in self.chunks.items()}
        else:
            doc["mappings"] = [m.to_json() for m in self.mappings]
        return doc

    @staticmethod
    def from_json(path: str, doc: dict) -> "DatasetMeta":
        dtype = ElementType(doc["dtype"])
        meta = DatasetMeta(path=path, kind=doc["kind"], dtype=dtype,
                           shape=tuple(doc["shape"]),
                           fill=dtype.cast_fill(doc["fill"]))
        if meta.kind == KIND_STORED:
            meta.chunk_shape = tuple(doc["chunk_shape"])
            meta.chunks = {
                tuple(int(c) for c in key.split(",")): (int(v[0]), int(v[1]))
                for key, v in doc.get("chunks", {}).items()}
        elif meta.kind == KIND_VIRTUAL:
            meta.mappings = [Mapping.from_json(m)
                             for m in doc.get("mappings", [])]
        else:
            raise ValueError(f"unknown dataset kind {meta.kind!r}")
        return meta

    def data_bytes(self) -> int:
        """Bytes of live chunk extents (stored datasets)."""
        return sum(length for _, length in self.chunks.values())


# ---------------------------------------------------------------------------
# instrumentation

_counter_lock = threading.Lock()
_chunk_reads = 0
_mapping_writes = 0


def chunk_read_count() -> int:
    return _chunk_reads


def mapping_write_count() -> int:
    return _mapping_writes


def reset_counters() -> None:
    global _chunk_reads, _mapping_writes
    with _counter_lock:
        _chunk_reads = 0
        _mapping_writes = 0


def _count_chunk_read() -> None:
    global _chunk_reads
    with _counter_lock:
        _chunk_reads += 1


def _count_mapping_writes(n: int) -> None:
    global _mapping_writes
    with _counter_lock:
        _mapping_writes += n


# ---------------------------------------------------------------------------
# footer encode/parse

def _encode_footer(datasets: dict[str, DatasetMeta]) -> bytes:
    doc = {"datasets": {path: m.to_json() for path, m in datasets.items()}}
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return body + struct.pack("<Q", len(body)) + END_MAGIC


def _parse_footer_bytes(body: bytes) -> dict[str, DatasetMeta]:
    try:
        doc = json.loads(body.decode("utf-8"))
        datasets = {path: DatasetMeta.from_json(path, sub)
                    for path, sub in doc["datasets"].items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise MetadataParseError(f"metadata document invalid: {exc}") from exc
    return datasets


def _read_committed_state(path: str):
    """Validate magics and parse the footer. Returns (datasets, meta_start)."""
    with open(path, "rb") as f:
        size = os.fstat(f.fileno()).st_size
        if size < HEADER_SIZE:
            raise TruncatedFooterError(f"{path}: file shorter than header")
        if f.read(8) != HEADER_MAGIC:
            raise BadMagicError(f"{path}: bad header magic")
        if size < HEADER_SIZE + 16:
            raise TruncatedFooterError(f"{path}: no room for a footer")
        f.seek(size - 16)
        tail = f.read(16)
        if tail[8:] != END_MAGIC:
            raise BadMagicError(f"{path}: bad end magic")
        (meta_len,) = struct.unpack("<Q", tail[:8])
        meta_start = size - 16 - meta_len
        if meta_start < HEADER_SIZE:
            raise TruncatedFooterError(
                f"{path}: metadata length {meta_len} exceeds file body")
        f.seek(meta_start)
        datasets = _parse_footer_bytes(f.read(meta_len))
    for meta in datasets.values():
        for off, length in meta.chunks.values():
            if off < HEADER_SIZE or off + length > meta_start:
                raise CorruptionError(
                    f"{path}: chunk extent [{off},{off + length}) outside "
                    f"data region")
    return datasets, meta_start


def _normalize_path(path: str) -> str:
    if not path or path == "/":
        raise ValueError("empty dataset path")
    return path if path.startswith("/") else "/" + path


class Container:
    """Handle to one container file. Not safe for concurrent use by two
    threads; per-file concurrency is writer-lock / footer-latch mediated."""

    def __init__(self, path, mode, fileobj, datasets, data_end, footer,
                 writer_lock=None):
        self.path = os.path.abspath(path)
        self.mode = mode
        self._f = fileobj
        self._datasets: dict[str, DatasetMeta] = datasets
        self._committed_data_end = data_end   # where the committed footer sits
        self._committed_footer = footer
        self._data_cursor = data_end          # next append offset
        self._writer_lock = writer_lock
        self._dirty = False
        self._closed = False
        self.chunk_reads = 0                  # per-handle instrumentation

    # -- lifecycle ---------------------------------------------------------

    @property
    def writable(self) -> bool:
        return self.mode == "w"

    def close(self) -> None:
        """Release locks; uncommitted changes are discarded and the file is
        restored byte-identical to its last committed state."""
        if self._closed:
            return
        if self.writable and self._dirty:
            with footer_latch(self.path, exclusive=True):
                self._f.seek(self._committed_data_end)
                self._f.write(self._committed_footer)
                self._f.truncate()
                self._f.flush()
        self._f.close()
        if self._writer_lock is not None:
            self._writer_lock.release()
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _require_writable(self):
        if self._closed:
            raise AbridgeError("handle is closed")
        if not self.writable:
            raise AbridgeError("handle is read-only")

    def _meta(self, path: str) -> DatasetMeta:
        meta = self._datasets.get(_normalize_path(path))
        if meta is None:
            raise DatasetNotFoundError(f"no dataset {path!r} in {self.path}")
        return meta

    # -- commit ------------------------------------------------------------

    def commit(self) -> None:
        """Durably publish all metadata and chunk writes since the last
        commit. Readers see the old or the new footer, never a torn one."""
        self._require_writable()
        footer = _encode_footer(self._datasets)
        with footer_latch(self.path, exclusive=True):
            try:
                self._f.seek(self._data_cursor)
                self._f.write(footer)
                self._f.truncate()
                self._f.flush()
                os.fsync(self._f.fileno())
            except OSError:
                # Put the previous committed state back at the tail.
                self._f.seek(self._committed_data_end)
                self._f.write(self._committed_footer)
                self._f.truncate()
                self._f.flush()
                raise
        self._committed_footer = footer
        self._committed_data_end = self._data_cursor
        self._dirty = False

    # -- dataset DDL ---------------------------------------------------------

    def create_dataset(self, path, dtype, shape, chunk_shape, fill_value) -> None:
        self._require_writable()
        path = _normalize_path(path)
        if path in self._datasets:
            raise DatasetExistsError(path)
        dtype = ElementType(dtype)
        shape = tuple(int(s) for s in shape)
        chunk_shape = tuple(int(c) for c in chunk_shape)
        if len(chunk_shape) != len(shape):
            raise ValueError("chunk_shape rank differs from shape rank")
        if any(c < 1 for c in chunk_shape) or any(s < 1 for s in shape):
            raise ValueError("shape and chunk_shape components must be >= 1")
        self._datasets[path] = DatasetMeta(
            path=path, kind=KIND_STORED, dtype=dtype, shape=shape,
            fill=dtype.cast_fill(fill_value), chunk_shape=chunk_shape)
        self._dirty = True

    def _validate_mappings(self, shape, rank, mappings) -> list[Mapping]:
        mappings = list(mappings)
        for m in mappings:
            if m.dst.rank != rank:
                raise ValueError(f"mapping dst rank {m.dst.rank} != {rank}")
            if not m.dst.within(shape):
                raise ValueError(f"mapping dst {m.dst} outside shape {shape}")
        for i, a in enumerate(mappings):
            for b in mappings[i + 1:]:
                if a.dst.intersect(b.dst) is not None:
                    raise MappingOverlapError(
                        f"dst regions {a.dst} and {b.dst} overlap")
        return mappings

    def create_virtual_dataset(self, path, dtype, shape, fill_value,
                               mappings) -> None:
        """Sources are late-bound: they are not opened or checked here."""
        self._require_writable()
        path = _normalize_path(path)
        if path in self._datasets:
            raise DatasetExistsError(path)
        dtype = ElementType(dtype)
        shape = tuple(int(s) for s in shape)
        mappings = self._validate_mappings(shape, len(shape), mappings)
        self._datasets[path] = DatasetMeta(
            path=path, kind=KIND_VIRTUAL, dtype=dtype, shape=shape,
            fill=dtype.cast_fill(fill_value), mappings=mappings)
        _count_mapping_writes(len(mappings))
        self._dirty = True

    def recreate_virtual_dataset(self, path, mappings) -> None:
        """Replace the whole mapping list (the only way to change it)."""
        self._require_writable()
        meta = self._meta(path)
        if meta.kind != KIND_VIRTUAL:
            raise AbridgeError(f"{path!r} is a stored dataset")
        meta.mappings = self._validate_mappings(meta.shape, len(meta.shape),
                                                mappings)
        _count_mapping_writes(len(meta.mappings))
        self._dirty = True

    def rename_dataset(self, old_path, new_path) -> None:
        """Metadata-only move; mappings elsewhere that reference old_path are
        left untouched (callers repair them explicitly)."""
        self._require_writable()
        old_path = _normalize_path(old_path)
        new_path = _normalize_path(new_path)
        if old_path not in self._datasets:
            raise DatasetNotFoundError(old_path)
        if new_path in self._datasets:
            raise DatasetExistsError(new_path)
        meta = self._datasets.pop(old_path)
        meta.path = new_path
        self._datasets[new_path] = meta
        self._dirty = True

    def list_datasets(self) -> list[tuple[str, str, tuple[int, ...], ElementType]]:
        return [(p, m.kind, m.shape, m.dtype)
                for p, m in sorted(self._datasets.items())]

    def dataset(self, path: str) -> DatasetMeta:
        return self._meta(path)

    def has_dataset(self, path: str) -> bool:
        return _normalize_path(path) in self._datasets

    def data_bytes(self, path: str) -> int:
        return self._meta(path).data_bytes()

    # -- chunk I/O -----------------------------------------------------------

    def _check_aligned(self, meta: DatasetMeta, chunk_coord) -> tuple[int, ...]:
        coord = tuple(int(c) for c in chunk_coord)
        if len(coord) != len(meta.shape):
            raise ValueError("chunk coordinate rank mismatch")
        if any(c % ch for c, ch in zip(coord, meta.chunk_shape)):
            raise ValueError(f"chunk coordinate {coord} not aligned to "
                             f"{meta.chunk_shape}")
        if any(c < 0 or c >= dim for c, dim in zip(coord, meta.shape)):
            raise ValueError(f"chunk coordinate {coord} outside shape "
                             f"{meta.shape}")
        return coord

    def write_chunk(self, path, chunk_coord, cells) -> None:
        """Append one full (padded) chunk and repoint the index entry.

        The committed footer is re-appended after the new extent so readers
        can keep opening the file mid-session.
        """
        self._require_writable()
        meta = self._meta(path)
        if meta.kind != KIND_STORED:
            raise AbridgeError(f"{path!r} is virtual; chunks cannot be written")
        coord = self._check_aligned(meta, chunk_coord)
        cells = np.asarray(cells)
        expected = 1
        for c in meta.chunk_shape:
            expected *= c
        if cells.size != expected:
            raise ValueError(f"buffer holds {cells.size} cells, chunk needs "
                             f"{expected}")
        payload = np.ascontiguousarray(cells.ravel(),
                                       dtype=meta.dtype.np_dtype)
        with footer_latch(self.path, exclusive=True):
            self._f.seek(self._data_cursor)
            self._f.write(payload)  # buffer protocol: no intermediate copy
            self._f.write(self._committed_footer)
            self._f.truncate()
            self._f.flush()
        meta.chunks[coord] = (self._data_cursor, payload.nbytes)
        self._data_cursor += payload.nbytes
        self._dirty = True

    def _chunk_cells(self, meta: DatasetMeta, coord) -> np.ndarray:
        """Full padded chunk buffer; fill values for never-written chunks."""
        self.chunk_reads += 1
        _count_chunk_read()
        entry = meta.chunks.get(coord)
        if entry is None:
            return np.full(meta.chunk_shape, meta.fill,
                           dtype=meta.dtype.np_dtype)
        offset, length = entry
        out = np.empty(meta.chunk_shape, dtype=meta.dtype.np_dtype)
        if length != out.nbytes:
            raise CorruptionError(f"chunk {coord} extent holds {length} "
                                  f"bytes, expected {out.nbytes}")
        self._f.seek(offset)
        got = self._f.readinto(memoryview(out).cast("B"))
        if got != length:
            raise CorruptionError(f"short read of chunk {coord} in {self.path}")
        return out

    def read_chunk(self, path, chunk_coord, out=None) -> np.ndarray:
        meta = self._meta(path)
        if meta.kind != KIND_STORED:
            raise AbridgeError(f"{path!r} is virtual; use read_region")
        coord = self._check_aligned(meta, chunk_coord)
        cells = self._chunk_cells(meta, coord)
        if out is not None:
            out[...] = cells
            return out
        return cells

    # -- region reads --------------------------------------------------------

    def read_region(self, path, region: Hyperslab, out=None) -> np.ndarray:
        """Assemble an arbitrary hyperslab; fill value where nothing covers it.

        Virtual datasets resolve through their mapping lists, recursively;
        a revisited (file, dataset) pair raises CyclicReferenceError.
        """
        cache: dict[str, Container] = {}
        try:
            return self._read_region(path, region, out, frozenset(), cache)
        finally:
            for handle in cache.values():
                handle.close()

    def _read_region(self, path, region, out, visited, cache) -> np.ndarray:
        meta = self._meta(path)
        if not region.within(meta.shape):
            raise ValueError(f"region {region} outside shape {meta.shape}")
        if out is None:
            out = np.full(region.count, meta.fill, dtype=meta.dtype.np_dtype)
        else:
            out[...] = meta.fill
        if meta.kind == KIND_STORED:
            for coord in chunks_intersecting(region, meta.chunk_shape):
                box = chunk_box(coord, meta.chunk_shape, meta.shape)
                isect = box.intersect(region)
                if isect is None:
                    continue
                cells = self._chunk_cells(meta, coord)
                src_sel = tuple(
                    slice(s - c, s - c + n)
                    for s, c, n in zip(isect.start, coord, isect.count))
                dst_sel = tuple(
                    slice(s - r, s - r + n)
                    for s, r, n in zip(isect.start, region.start, isect.count))
                out[dst_sel] = cells[src_sel]
            return out

        key = (os.path.realpath(self.path), _normalize_path(path))
        if key in visited:
            raise CyclicReferenceError(
                f"virtual dataset cycle through {key}")
        visited = visited | {key}
        for m in meta.mappings:
            isect = m.dst.intersect(region)
            if isect is None:
                continue
            src_slab = Hyperslab(
                tuple(ss + (i - ds) for ss, i, ds in
                      zip(m.src.start, isect.start, m.dst.start)),
                isect.count)
            source = self._resolve_source(m.source_file, cache)
            try:
                data = source._read_region(m.source_dataset, src_slab, None,
                                           visited, cache)
            except DatasetNotFoundError as exc:
                raise SourceMissingError(str(exc)) from exc
            dst_sel = tuple(
                slice(s - r, s - r + n)
                for s, r, n in zip(isect.start, region.start, isect.count))
            out[dst_sel] = data
        return out

    def _resolve_source(self, source_file: str, cache) -> "Container":
        """Late binding: sources are opened on first use during a read."""
        if source_file == SELF_FILE:
            return self
        resolved = source_file
        if not os.path.isabs(resolved):
            resolved = os.path.join(os.path.dirname(self.path), resolved)
        real = os.path.realpath(resolved)
        if real == os.path.realpath(self.path):
            return self
        handle = cache.get(real)
        if handle is None:
            if not os.path.exists(resolved):
                raise SourceMissingError(f"mapping source file {resolved!r} "
                                         f"does not exist")
            handle = open_file(resolved, "r")
            cache[real] = handle
        return handle


# ---------------------------------------------------------------------------
# open/create

def create_file(path, truncate: bool = False, lock_timeout=None) -> Container:
    """Create an empty container; the returned handle is the exclusive
    writer and the empty state is already committed."""
    exists = os.path.exists(path)
    if exists and not truncate:
        raise FileExistsError(f"{path} exists and truncate was not requested")
    timeout = default_lock_timeout() if lock_timeout is None else lock_timeout
    lock = WriterLock(path)
    lock.acquire(timeout)
    try:
        footer = _encode_footer({})
        # Reinitialization happens under the latch so concurrent readers of
        # a pre-existing file never observe a half-truncated state.
        f = open(path, "r+b") if exists else open(path, "wb+")
        with footer_latch(path, exclusive=True):
            f.seek(0)
            f.write(HEADER_MAGIC)
            f.write(b"\x00" * 8)
            f.write(footer)
            f.truncate()
            f.flush()
            os.fsync(f.fileno())
    except BaseException:
        lock.release()
        raise
    return Container(path, "w", f, {}, HEADER_SIZE, footer, lock)


def open_file(path, mode: str = "r", lock_timeout=None) -> Container:
    """Open an existing container.

    mode "r": any number of concurrent readers. mode "w": the single
    writer; fails fast with SingleWriterViolation unless a lock timeout
    grants a waiting budget.
    """
    if mode not in ("r", "w"):
        raise ValueError("mode must be 'r' or 'w'")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    lock = None
    if mode == "w":
        timeout = default_lock_timeout() if lock_timeout is None else lock_timeout
        lock = WriterLock(path)
        lock.acquire(timeout)
    try:
        with footer_latch(path, exclusive=False):
            datasets, meta_start = _read_committed_state(path)
            with open(path, "rb") as fr:
                fr.seek(meta_start)
                footer = fr.read()
        f = open(path, "rb+" if mode == "w" else "rb")
    except BaseException:
        if lock is not None:
            lock.release()
        raise
    return Container(path, mode, f, datasets, meta_start, footer, lock)
