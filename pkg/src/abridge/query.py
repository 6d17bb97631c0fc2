"""Aggregation queries over external arrays, and the flat-load path.

Each simulated instance drains its own scan, folds chunk tiles into
mergeable partial aggregates, and forwards them to the coordinator, which
merges in instance order. Redistribution is in-process message passing
with byte accounting; per-phase wall times are recorded so the scan /
aggregate / redistribute / coordinator breakdown can be emitted as CSV.

The load path stages a binary input as a one-dimensional table of
coordinate plus value attributes, then redimensions it into a
multi-dimensional dataset; a space tracker reports the staging components.
"""

import os
import pickle
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import container as _c
from . import scan as _scan
from .catalog import ArraySchema, Catalog
from .container import ElementType, Hyperslab, chunk_box, chunks_intersecting
from .errors import AbridgeError
from .rlechunk import decode_rle, iterate_tiled
from .sources import MemorySource

DEFAULT_TILE = 4096


def compile_predicate(expr: str):
    """Tiny filter grammar: ``<attr> <op> <number>`` with < <= > >= == !=.

    IEEE comparison semantics apply, so NaN cells fail every predicate.
    """
    for op in ("<=", ">=", "==", "!=", "<", ">"):
        if op in expr:
            attr, _, rhs = expr.partition(op)
            attr = attr.strip()
            value = float(rhs)
            fn = {"<": np.less, "<=": np.less_equal,
                  ">": np.greater, ">=": np.greater_equal,
                  "==": np.equal, "!=": np.not_equal}[op]
            return lambda attrs: fn(attrs[attr], value)
    raise ValueError(f"cannot parse predicate {expr!r}")


@dataclass
class AggregateSpec:
    func: str = "sum"                 # sum | count | min | max | avg
    value: object = None              # attr name or callable(attrs)->ndarray
    predicate: object = None          # "E>2.0" or callable(attrs)->mask
    grid: tuple[int, ...] | None = None  # grid cell shape for grouped output

    def __post_init__(self):
        if self.func not in ("sum", "count", "min", "max", "avg"):
            raise ValueError(f"unknown aggregate {self.func!r}")
        if isinstance(self.predicate, str):
            self.predicate = compile_predicate(self.predicate)

    def value_of(self, attrs: dict, default_attr: str) -> np.ndarray:
        if callable(self.value):
            return self.value(attrs)
        return attrs[self.value or default_attr]


@dataclass
class PartialAggregate:
    """Mergeable running (sum, count, min, max); merge is associative and
    commutative."""

    sum: float | int = 0   # stays an exact int for integer inputs
    count: int = 0
    min: float | None = None
    max: float | None = None

    def fold(self, values: np.ndarray) -> None:
        if values.size == 0:
            return
        self.count += int(values.size)
        if values.dtype.kind in "iu":
            self.sum += int(values.sum(dtype=np.int64))
        else:
            self.sum += float(values.sum(dtype=np.float64))
        lo, hi = values.min(), values.max()
        self.min = lo if self.min is None else min(self.min, lo)
        self.max = hi if self.max is None else max(self.max, hi)

    def fold_run(self, value, repeat: int) -> None:
        self.count += repeat
        self.sum += (int(value) if isinstance(value, (int, np.integer))
                     else float(value)) * repeat
        self.min = value if self.min is None else min(self.min, value)
        self.max = value if self.max is None else max(self.max, value)

    def merge(self, other: "PartialAggregate") -> None:
        self.sum += other.sum
        self.count += other.count
        for name, pick in (("min", min), ("max", max)):
            mine, theirs = getattr(self, name), getattr(other, name)
            if theirs is not None:
                setattr(self, name,
                        theirs if mine is None else pick(mine, theirs))

    def result(self, func: str):
        """None for value aggregates over zero cells (explicit emptiness)."""
        if func == "count":
            return self.count
        if self.count == 0:
            return None
        if func == "sum":
            return self.sum
        if func == "avg":
            return self.sum / self.count
        return getattr(self, func)


@dataclass
class PhaseTimings:
    coordinator_s: float = 0.0
    scan_s: float = 0.0
    aggregate_s: float = 0.0
    redistribute_s: float = 0.0
    bytes_redistributed: int = 0

    CSV_HEADER = ("instances,coordinator_s,scan_s,aggregate_s,"
                  "redistribute_s,bytes_redistributed")

    def csv_row(self, instances: int) -> str:
        return (f"{instances},{self.coordinator_s:.6f},{self.scan_s:.6f},"
                f"{self.aggregate_s:.6f},{self.redistribute_s:.6f},"
                f"{self.bytes_redistributed}")


def _grid_extents(shape, grid_cell) -> tuple[int, ...]:
    return tuple(_c.ceil_div(s, g) for s, g in zip(shape, grid_cell))


class _Folder:
    """Folds in-order batches of one chunk region into partials."""

    def __init__(self, spec: AggregateSpec, shape, default_attr):
        self.spec = spec
        self.shape = shape
        self.default_attr = default_attr
        self.partials: dict = {}
        self.global_partial = PartialAggregate()

    def fold_region(self, region: Hyperslab, bufs: dict) -> None:
        """bufs: attr -> flat row-major cells of `region`."""
        spec = self.spec
        n = region.cells
        tileable = (spec.predicate is None and spec.grid is None
                    and not callable(spec.value))
        if tileable:
            self.global_partial.fold(bufs[spec.value or self.default_attr])
            return
        offsets = np.arange(n)
        values = spec.value_of(bufs, self.default_attr)
        if spec.predicate is not None:
            mask = spec.predicate(bufs)
            offsets = offsets[mask]
            values = values[mask]
        if spec.grid is None:
            self.global_partial.fold(values)
            return
        multi = np.unravel_index(offsets, region.count)
        gids = np.ravel_multi_index(
            tuple((m + s) // g for m, s, g in
                  zip(multi, region.start, spec.grid)),
            _grid_extents(self.shape, spec.grid))
        uniq, inverse = np.unique(gids, return_inverse=True)
        sums = np.bincount(inverse, weights=values)
        counts = np.bincount(inverse)
        mins = np.full(uniq.size, np.inf)
        maxs = np.full(uniq.size, -np.inf)
        np.minimum.at(mins, inverse, values)
        np.maximum.at(maxs, inverse, values)
        for j, gid in enumerate(uniq):
            pa = self.partials.get(gid)
            if pa is None:
                pa = self.partials[gid] = PartialAggregate()
            pa.count += int(counts[j])
            pa.sum += float(sums[j])
            pa.min = mins[j] if pa.min is None else min(pa.min, mins[j])
            pa.max = maxs[j] if pa.max is None else max(pa.max, maxs[j])

    def payload(self):
        return (self.global_partial, self.partials)


def _dense_cells(rle_chunk) -> np.ndarray:
    segs = rle_chunk.segments
    if len(segs) == 1 and not segs[0].same:
        return segs[0].data
    return decode_rle(rle_chunk)


def _fold_simple_tiled(folder: _Folder, rle_chunk, tile_size: int,
                       attr: str) -> None:
    acc = folder.global_partial

    def visit(batch):
        if isinstance(batch, tuple):
            acc.fold_run(*batch)
        else:
            acc.fold(batch)

    iterate_tiled(rle_chunk, tile_size, visit)


def _merge_instance_payloads(payloads: list):
    total = PartialAggregate()
    cells: dict = {}
    for global_partial, partials in payloads:
        total.merge(global_partial)
        for gid, pa in partials.items():
            mine = cells.get(gid)
            if mine is None:
                cells[gid] = pa
            else:
                mine.merge(pa)
    return total, cells


def _finalize(spec: AggregateSpec, shape, total, cells):
    if spec.grid is None:
        return total.result(spec.func)
    extents = _grid_extents(shape, spec.grid)
    out = {}
    for gid, pa in sorted(cells.items()):
        value = pa.result(spec.func)
        if value is not None or spec.func == "count":
            coord = tuple(int(c) for c in np.unravel_index(int(gid), extents))
            out[coord] = value
    return out


def aggregate(catalog: Catalog, array: str, attrs, spec: AggregateSpec,
              n_instances: int = 1, tile_size: int = DEFAULT_TILE):
    """Full-array aggregation. Returns (result, PhaseTimings)."""
    t_plan = time.perf_counter()
    if isinstance(attrs, str):
        attrs = [attrs]
    entry = catalog.entry(array)
    for a in attrs:
        entry.schema.attr_type(a)
    chan: queue.Queue = queue.Queue()
    coordinator_s = time.perf_counter() - t_plan

    def worker(instance):
        try:
            states = [_scan.start(catalog, array, a, n_instances, instance)
                      for a in attrs]
            shapes = {s.schema.shape for s in states}
            grids = {tuple(s.cp) for s in states}
            if len(shapes) != 1 or len(grids) != 1:
                raise AbridgeError(f"attributes of {array!r} disagree on "
                                   f"shape or chunking")
            folder = _Folder(spec, states[0].schema.shape, attrs[0])
            agg_s = 0.0
            simple = (spec.predicate is None and spec.grid is None
                      and not callable(spec.value) and len(attrs) == 1)
            while True:
                chunks = [_scan.next_chunk(s) for s in states]
                if chunks[0] is None:
                    break
                t0 = time.perf_counter()
                if simple:
                    _fold_simple_tiled(folder, chunks[0], tile_size, attrs[0])
                else:
                    coord = chunks[0].chunk_coord
                    region = chunk_box(coord, states[0].schema.chunk_shape,
                                       states[0].schema.shape)
                    bufs = {a: _dense_cells(c)
                            for a, c in zip(attrs, chunks)}
                    folder.fold_region(region, bufs)
                agg_s += time.perf_counter() - t0
            scan_s = sum(s.read_seconds for s in states)
            for s in states:
                s.close()
            blob = pickle.dumps(folder.payload())
            chan.put(("ok", instance, blob, scan_s, agg_s))
        except BaseException as exc:
            chan.put(("err", instance, f"{type(exc).__name__}: {exc}", 0, 0))

    workers = [threading.Thread(target=worker, args=(i,))
               for i in range(n_instances)]
    for w in workers:
        w.start()

    t_redist = time.perf_counter()
    arrivals: dict[int, bytes] = {}
    scan_times, agg_times = [], []
    errors = {}
    for _ in range(n_instances):
        status, instance, blob, scan_s, agg_s = chan.get()
        if status == "ok":
            arrivals[instance] = blob
            scan_times.append(scan_s)
            agg_times.append(agg_s)
        else:
            errors[instance] = blob
    for w in workers:
        w.join()
    if errors:
        raise AbridgeError(f"aggregation failed: {errors}")
    bytes_moved = sum(len(b) for b in arrivals.values())
    payloads = [pickle.loads(arrivals[i]) for i in range(n_instances)]
    total, cells = _merge_instance_payloads(payloads)
    redistribute_s = time.perf_counter() - t_redist

    t_final = time.perf_counter()
    result = _finalize(spec, entry.schema.shape, total, cells)
    coordinator_s += time.perf_counter() - t_final
    timings = PhaseTimings(
        coordinator_s=coordinator_s,
        scan_s=sum(scan_times) / max(len(scan_times), 1),
        aggregate_s=sum(agg_times) / max(len(agg_times), 1),
        redistribute_s=redistribute_s,
        bytes_redistributed=bytes_moved)
    return result, timings


def aggregate_region(catalog: Catalog, array: str, attr: str,
                     region: Hyperslab, spec: AggregateSpec,
                     n_instances: int = 1,
                     tile_size: int = DEFAULT_TILE):
    """Aggregate one contiguous region; only intersecting chunks are read.

    Instances reposition with set_position over the chunks the region
    touches and skip the ones assigned elsewhere.
    """
    t_plan = time.perf_counter()
    entry = catalog.entry(array)
    if not region.within(entry.schema.shape):
        raise ValueError(f"region {region} outside {entry.schema.shape}")
    chan: queue.Queue = queue.Queue()
    coordinator_s = time.perf_counter() - t_plan

    def worker(instance):
        try:
            state = _scan.start(catalog, array, attr, n_instances, instance)
            schema = state.schema
            folder = _Folder(spec, schema.shape, attr)
            agg_s = 0.0
            for coord in chunks_intersecting(region, schema.chunk_shape):
                box = chunk_box(coord, schema.chunk_shape, schema.shape)
                isect = box.intersect(region)
                if isect is None:
                    continue
                if not _scan.set_position(state, isect.start):
                    continue  # chunk belongs to another instance
                chunk = _scan.next_chunk(state)
                t0 = time.perf_counter()
                cells = _dense_cells(chunk).reshape(box.count)
                sel = tuple(slice(s - b, s - b + c) for s, b, c in
                            zip(isect.start, box.start, isect.count))
                folder.fold_region(isect, {attr: cells[sel].ravel()})
                agg_s += time.perf_counter() - t0
            scan_s = state.read_seconds
            chunks_read = state.chunks_read
            state.close()
            blob = pickle.dumps(folder.payload())
            chan.put(("ok", instance, blob, scan_s, agg_s, chunks_read))
        except BaseException as exc:
            chan.put(("err", instance, f"{type(exc).__name__}: {exc}", 0, 0, 0))

    workers = [threading.Thread(target=worker, args=(i,))
               for i in range(n_instances)]
    for w in workers:
        w.start()
    t_redist = time.perf_counter()
    arrivals, errors = {}, {}
    scan_times, agg_times = [], []
    chunks_read = 0
    for _ in range(n_instances):
        status, instance, blob, scan_s, agg_s, nread = chan.get()
        if status == "ok":
            arrivals[instance] = blob
            scan_times.append(scan_s)
            agg_times.append(agg_s)
            chunks_read += nread
        else:
            errors[instance] = blob
    for w in workers:
        w.join()
    if errors:
        raise AbridgeError(f"region aggregation failed: {errors}")
    bytes_moved = sum(len(b) for b in arrivals.values())
    payloads = [pickle.loads(arrivals[i]) for i in range(n_instances)]
    total, cells = _merge_instance_payloads(payloads)
    redistribute_s = time.perf_counter() - t_redist
    result = _finalize(spec, entry.schema.shape, total, cells)
    timings = PhaseTimings(
        coordinator_s=coordinator_s,
        scan_s=sum(scan_times) / max(len(scan_times), 1),
        aggregate_s=sum(agg_times) / max(len(agg_times), 1),
        redistribute_s=redistribute_s,
        bytes_redistributed=bytes_moved)
    timings.chunks_read = chunks_read
    return result, timings


# ---------------------------------------------------------------------------
# load / redimension

@dataclass
class SpaceTracker:
    """Byte components of the load path; the input is dropped when
    redimension starts, so peak = max(load stage, redimension stage)."""

    input_bytes: int = 0
    flat_bytes: int = 0
    output_bytes: int = 0

    @property
    def peak_bytes(self) -> int:
        return max(self.input_bytes + self.flat_bytes,
                   self.flat_bytes + self.output_bytes)


@dataclass
class FlatArray:
    """One-dimensional staging table: r coordinate attributes (i64) plus
    the value attributes, all equal length, each a container dataset."""

    path: str
    length: int
    coord_attrs: list[str]
    value_attrs: list[str]
    value_types: list[ElementType]
    tracker: SpaceTracker = field(default_factory=SpaceTracker)

    @property
    def rank(self) -> int:
        return len(self.coord_attrs)


_STAGE_CHUNK = 1 << 20


def load_flat(binary_path, r: int, value_types, shape=None,
              staging_path=None) -> FlatArray:
    """Stage a binary input as a flat table with synthesized coordinates.

    The input is export_binary layout for the value attributes; cells are
    row-major over `shape` (defaulting to one dimension), so coordinate
    attribute d holds each cell's offset along dimension d.
    """
    value_types = [ElementType(t) for t in value_types]
    if r < 1:
        raise ValueError("rank must be >= 1")
    cell = np.dtype([(f"v{i}", t.np_dtype)
                     for i, t in enumerate(value_types)])
    input_bytes = os.path.getsize(binary_path)
    if input_bytes % cell.itemsize:
        raise ValueError(f"input size {input_bytes} is not divisible by the "
                         f"{cell.itemsize}-byte cell width")
    n = input_bytes // cell.itemsize
    if shape is None:
        if r != 1:
            raise ValueError("shape is required to synthesize coordinates "
                             "for rank > 1")
        shape = (n,)
    shape = tuple(int(s) for s in shape)
    expected = 1
    for s in shape:
        expected *= s
    if n and expected != n:
        raise ValueError(f"shape {shape} holds {expected} cells, input has {n}")

    staging = staging_path or str(binary_path) + ".flat.abr"
    coord_attrs = [f"d{d}" for d in range(r)]
    value_attrs = [f"v{i}" for i in range(len(value_types))]
    flat = FlatArray(os.path.abspath(staging), int(n), coord_attrs,
                     value_attrs, value_types)
    flat.tracker.input_bytes = input_bytes

    handle = _c.create_file(staging, truncate=True)
    if n:
        rec = np.frombuffer(open(binary_path, "rb").read(), dtype=cell)
        coords = np.unravel_index(np.arange(n, dtype=np.int64), shape)
        chunk = (min(n, _STAGE_CHUNK),)
        columns = ([(f"/coords/{a}", coords[d].astype("<i8"), ElementType.i64)
                    for d, a in enumerate(coord_attrs)] +
                   [(f"/values/{a}", rec[f"v{i}"], t)
                    for i, (a, t) in enumerate(zip(value_attrs, value_types))])
        for path, column, dtype in columns:
            handle.create_dataset(path, dtype, (n,), chunk, 0)
            for start in range(0, n, chunk[0]):
                buf = column[start:start + chunk[0]]
                if buf.size < chunk[0]:
                    buf = np.concatenate(
                        [buf, np.zeros(chunk[0] - buf.size, dtype=buf.dtype)])
                handle.write_chunk(path, (start,), buf)
            flat.tracker.flat_bytes += int(column.nbytes)
    handle.commit()
    handle.close()
    return flat


def redimension(flat: FlatArray, schema: ArraySchema, out_path=None,
                dataset_prefix="/") -> tuple[str, list[str]]:
    """Place flat cells by their coordinate attributes into a stored
    multi-dimensional dataset per value attribute."""
    if len(flat.value_attrs) != len(schema.attributes):
        raise ValueError("schema attribute count differs from flat table")
    out_path = out_path or flat.path + ".redim.abr"
    n = flat.length

    coords = []
    values = []
    if n:
        with _c.open_file(flat.path, "r") as staging:
            full = Hyperslab((0,), (n,))
            coords = [staging.read_region(f"/coords/{a}", full)
                      for a in flat.coord_attrs]
            values = [staging.read_region(f"/values/{a}", full)
                      for a in flat.value_attrs]
        for d, c in enumerate(coords):
            if c.min() < 0 or c.max() >= schema.shape[d]:
                raise ValueError(f"coordinate attribute d{d} outside "
                                 f"shape {schema.shape}")
        linear = np.ravel_multi_index(tuple(coords), schema.shape)
        if np.unique(linear).size != n:
            raise ValueError("duplicate coordinates in flat table")

    handle = _c.create_file(out_path, truncate=True)
    paths = []
    for (attr, dtype), column in zip(
            schema.attributes, values or [None] * len(schema.attributes)):
        path = dataset_prefix.rstrip("/") + "/" + attr
        handle.create_dataset(path, dtype, schema.shape, schema.chunk_shape, 0)
        dense = np.zeros(schema.shape, dtype=dtype.np_dtype)
        if column is not None:
            dense.flat[linear] = column
        source = MemorySource({attr: dense}, schema.chunk_shape)
        for coord in _c.iter_chunk_starts(schema.shape, schema.chunk_shape):
            handle.write_chunk(path, coord, source.chunk_cells(coord, attr))
        flat.tracker.output_bytes += int(dense.nbytes)
        paths.append(path)
    handle.commit()
    handle.close()
    return os.path.abspath(out_path), paths
