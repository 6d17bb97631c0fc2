"""Materialize an array into container files, three ways.

Serial funnels every chunk through one writer: instance workers read
their share and ship buffers over a channel to the coordinator, which
writes a single file (bytes moved are measured; transfer is one in-process
copy). Partitioned gives every instance its own file holding a dataset of
the full global shape with only that instance's chunks written; unwritten
chunks cost nothing. Virtual View writes origin-translated slab files and
stitches them with a virtual dataset: the Parallel mapping strategy has
every instance take the view's writer lock, re-read the mapping list,
append its own and recreate the dataset (n(n+1)/2 mapping writes in
total); the Coordinator strategy gathers (src, dst) pairs behind a barrier
and creates the view once (n writes).

Also here: csv / binary / opaque exports and their parse-back importers.
"""

import os
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from itertools import product
from multiprocessing import Process
from multiprocessing import Queue as MpQueue

import numpy as np

from . import container as _c
from .container import (
    ElementType,
    Hyperslab,
    Mapping,
    chunk_box,
    grid_shape,
    iter_chunk_starts,
)
from .errors import AbridgeError, BarrierTimeoutError
from .locking import default_lock_timeout
from .rlechunk import encode_rle
from .sources import ArraySource

DEFAULT_DATASET = "/data"
DEFAULT_LOCK_TIMEOUT_S = 30.0
DEFAULT_BARRIER_TIMEOUT_S = 60.0


class PartialSaveError(AbridgeError):
    """Some instances failed; files already written are left in place."""

    def __init__(self, per_instance: dict):
        self.per_instance = per_instance
        super().__init__(f"save failed on instances {sorted(per_instance)}: "
                         f"{per_instance}")


@dataclass(frozen=True)
class PartitionSlab:
    instance: int
    src: Hyperslab   # within the instance's partition dataset
    dst: Hyperslab   # within the global array


@dataclass
class PartitionPlan:
    shape: tuple[int, ...]
    chunk_shape: tuple[int, ...]
    slabs: list[PartitionSlab]

    def __iter__(self):
        return iter(self.slabs)

    def __len__(self):
        return len(self.slabs)


def plan_partitions(shape, chunk_shape, n_instances: int) -> PartitionPlan:
    """Split the chunk grid along dimension 0 into n contiguous slabs of
    nearly equal chunk-row counts (difference <= 1)."""
    shape = tuple(int(s) for s in shape)
    chunk_shape = tuple(int(c) for c in chunk_shape)
    rows = grid_shape(shape, chunk_shape)[0]
    if rows < n_instances:
        raise ValueError(f"{rows} chunk rows cannot feed {n_instances} "
                         f"instances")
    base, extra = divmod(rows, n_instances)
    slabs = []
    row = 0
    for i in range(n_instances):
        nrows = base + (1 if i < extra else 0)
        start0 = row * chunk_shape[0]
        count0 = min(nrows * chunk_shape[0], shape[0] - start0)
        dst = Hyperslab((start0,) + (0,) * (len(shape) - 1),
                        (count0,) + shape[1:])
        src = Hyperslab((0,) * len(shape), dst.count)
        slabs.append(PartitionSlab(i, src, dst))
        row += nrows
    return PartitionPlan(shape, chunk_shape, slabs)


@dataclass
class SaveReport:
    mode: str
    n_instances: int
    paths: list[str]
    seconds: float = 0.0
    bytes_written: int = 0
    bytes_shuffled: int = 0
    shuffle_seconds: float = 0.0
    write_seconds: float = 0.0
    mappings_written: int = 0
    instance_seconds: list[float] = field(default_factory=list)

    @property
    def throughput_mib_s(self) -> float:
        if self.seconds <= 0:
            return float("inf")
        return self.bytes_written / (1024 * 1024) / self.seconds


def _slab_chunk_starts(dst: Hyperslab, shape, chunk_shape):
    ranges = [range(dst.start[0], dst.start[0] + dst.count[0], chunk_shape[0])]
    ranges += [range(0, shape[d], chunk_shape[d])
               for d in range(1, len(shape))]
    yield from product(*ranges)


def _run_workers(target, n_instances, common_args, use_processes=False):
    """Run target(out_queue, instance, *common_args) on n workers; returns
    {instance: payload}. Failures are collected per instance."""
    if use_processes:
        out: MpQueue = MpQueue()
        workers = [Process(target=target, args=(out, i) + tuple(common_args))
                   for i in range(n_instances)]
    else:
        out = queue.Queue()
        workers = [threading.Thread(target=target,
                                    args=(out, i) + tuple(common_args))
                   for i in range(n_instances)]
    for w in workers:
        w.start()
    results, errors = {}, {}
    for _ in range(n_instances):
        status, instance, payload = out.get()
        if status == "ok":
            results[instance] = payload
        else:
            errors[instance] = payload
    for w in workers:
        w.join()
    if errors:
        raise PartialSaveError(errors)
    return results


# ---------------------------------------------------------------------------
# serial

def _serial_producer_task(chan, instance, source, coords, n_instances, attr):
    """Ship this instance's chunks to the coordinator over the channel."""
    try:
        src = source.clone()
        t0 = time.perf_counter()
        moved = 0
        for k in range(instance, len(coords), n_instances):
            buf = np.array(src.chunk_cells(coords[k], attr))  # transfer copy
            moved += buf.nbytes
            chan.put(("chunk", k, buf))
        src.close()
        chan.put(("done", instance, (time.perf_counter() - t0, moved)))
    except BaseException as exc:
        chan.put(("err", instance, f"{type(exc).__name__}: {exc}"))


def save_serial(source: ArraySource, out_path, dataset=DEFAULT_DATASET,
                n_instances: int = 1, attr=None,
                use_processes=False) -> SaveReport:
    """One writer, one file; instance workers shuffle their chunks to it.

    The file bytes are instance-count invariant: the coordinator writes
    chunks in row-major order regardless of arrival order. With process
    workers the shuffle is a real IPC byte transfer into the coordinator.
    """
    attr = attr or source.single_attr
    coords = list(iter_chunk_starts(source.shape, source.chunk_shape))

    t_start = time.perf_counter()
    if use_processes:
        chan: MpQueue = MpQueue(maxsize=2 * max(n_instances, 1))
        workers = [Process(target=_serial_producer_task,
                           args=(chan, i, source, coords, n_instances, attr))
                   for i in range(n_instances)]
    else:
        chan = queue.Queue(maxsize=2 * max(n_instances, 1))
        workers = [threading.Thread(
                       target=_serial_producer_task,
                       args=(chan, i, source, coords, n_instances, attr))
                   for i in range(n_instances)]
    for w in workers:
        w.start()

    handle = _c.create_file(out_path, truncate=True)
    handle.create_dataset(dataset, source.dtype(attr), source.shape,
                          source.chunk_shape, source.fill(attr))
    write_s = 0.0
    written = 0
    shuffle_s, shuffled, errors = [], 0, {}
    pending: dict[int, np.ndarray] = {}
    expect = 0
    done = 0
    while done < n_instances:
        msg = chan.get()
        if msg[0] == "done":
            seconds, moved = msg[2]
            shuffle_s.append(seconds)
            shuffled += moved
            done += 1
            continue
        if msg[0] == "err":
            errors[msg[1]] = msg[2]
            done += 1
            continue
        _, k, buf = msg
        pending[k] = buf
        while expect in pending:
            buf = pending.pop(expect)
            t0 = time.perf_counter()
            handle.write_chunk(dataset, coords[expect], buf)
            write_s += time.perf_counter() - t0
            written += buf.nbytes
            expect += 1
    for w in workers:
        w.join()
    if errors:
        handle.close()
        raise PartialSaveError(errors)
    t0 = time.perf_counter()
    handle.commit()
    handle.close()
    write_s += time.perf_counter() - t0
    return SaveReport(mode="serial", n_instances=n_instances,
                      paths=[os.path.abspath(out_path)],
                      seconds=time.perf_counter() - t_start,
                      bytes_written=written, bytes_shuffled=shuffled,
                      shuffle_seconds=max(shuffle_s) if shuffle_s else 0.0,
                      write_seconds=write_s)


# ---------------------------------------------------------------------------
# partitioned

def partition_path(prefix: str, instance: int) -> str:
    return f"{prefix}.p{instance}.abr"


def _partitioned_task(out, instance, source, prefix, dataset, plan, attr):
    try:
        src = source.clone()
        slab = plan.slabs[instance]
        t0 = time.perf_counter()
        written = 0
        with _c.create_file(partition_path(prefix, instance),
                            truncate=True) as handle:
            handle.create_dataset(dataset, src.dtype(attr), plan.shape,
                                  plan.chunk_shape, src.fill(attr))
            for coord in _slab_chunk_starts(slab.dst, plan.shape,
                                            plan.chunk_shape):
                buf = src.chunk_cells(coord, attr)
                handle.write_chunk(dataset, coord, buf)
                written += buf.nbytes
            handle.commit()
        src.close()
        out.put(("ok", instance, (time.perf_counter() - t0, written)))
    except BaseException as exc:  # worker boundary
        out.put(("err", instance, f"{type(exc).__name__}: {exc}"))


def save_partitioned(source: ArraySource, out_prefix, n_instances: int,
                     dataset=DEFAULT_DATASET, attr=None,
                     use_processes=False) -> SaveReport:
    """One file per instance, each a dataset of the full global shape with
    only that instance's chunks present."""
    attr = attr or source.single_attr
    plan = plan_partitions(source.shape, source.chunk_shape, n_instances)
    t_start = time.perf_counter()
    results = _run_workers(_partitioned_task, n_instances,
                           (source, str(out_prefix), dataset, plan, attr),
                           use_processes)
    seconds = time.perf_counter() - t_start
    return SaveReport(
        mode="partitioned", n_instances=n_instances,
        paths=[partition_path(str(out_prefix), i) for i in range(n_instances)],
        seconds=seconds,
        bytes_written=sum(w for _, w in results.values()),
        instance_seconds=[results[i][0] for i in range(n_instances)])


# ---------------------------------------------------------------------------
# virtual view

def _write_local_slab(source, prefix, instance, dataset, slab, attr):
    """Partition file for the virtual view: dataset has the slab's local
    origin-translated shape."""
    written = 0
    with _c.create_file(partition_path(prefix, instance),
                        truncate=True) as handle:
        handle.create_dataset(dataset, source.dtype(attr), slab.dst.count,
                              source.chunk_shape, source.fill(attr))
        for local in iter_chunk_starts(slab.dst.count, source.chunk_shape):
            coord = tuple(l + s for l, s in zip(local, slab.dst.start))
            buf = source.chunk_cells(coord, attr)
            handle.write_chunk(dataset, local, buf)
            written += buf.nbytes
        handle.commit()
    return written


def _virtual_parallel_task(out, instance, source, view_path, prefix, dataset,
                           plan, attr, lock_timeout):
    try:
        src = source.clone()
        slab = plan.slabs[instance]
        t0 = time.perf_counter()
        written = _write_local_slab(src, prefix, instance, dataset, slab, attr)
        src.close()
        mapping = Mapping(
            os.path.relpath(partition_path(prefix, instance),
                            os.path.dirname(os.path.abspath(view_path))),
            dataset, slab.src, slab.dst)
        # Append under the view's writer lock; the dataset must be rebuilt
        # from scratch, so each arrival rewrites every prior mapping.
        with _c.open_file(view_path, "w", lock_timeout=lock_timeout) as view:
            mappings = list(view.dataset(dataset).mappings) + [mapping]
            view.recreate_virtual_dataset(dataset, mappings)
            view.commit()
        out.put(("ok", instance,
                 (time.perf_counter() - t0, written, len(mappings))))
    except BaseException as exc:
        out.put(("err", instance, f"{type(exc).__name__}: {exc}"))


def _virtual_coordinator_task(out, instance, source, view_path, prefix,
                              dataset, plan, attr):
    try:
        src = source.clone()
        slab = plan.slabs[instance]
        t0 = time.perf_counter()
        written = _write_local_slab(src, prefix, instance, dataset, slab, attr)
        src.close()
        mapping = Mapping(
            os.path.relpath(partition_path(prefix, instance),
                            os.path.dirname(os.path.abspath(view_path))),
            dataset, slab.src, slab.dst)
        out.put(("ok", instance, (time.perf_counter() - t0, written, mapping)))
    except BaseException as exc:
        out.put(("err", instance, f"{type(exc).__name__}: {exc}"))


def save_virtual(source: ArraySource, out_path, n_instances: int,
                 strategy: str = "coordinator", dataset=DEFAULT_DATASET,
                 attr=None, use_processes=False, lock_timeout=None,
                 barrier_timeout=DEFAULT_BARRIER_TIMEOUT_S) -> SaveReport:
    """Slab files plus one view container whose virtual dataset stitches
    them into the global array."""
    if strategy not in ("parallel", "coordinator"):
        raise ValueError(f"unknown mapping strategy {strategy!r}")
    if lock_timeout is None:
        lock_timeout = default_lock_timeout() or DEFAULT_LOCK_TIMEOUT_S
    attr = attr or source.single_attr
    plan = plan_partitions(source.shape, source.chunk_shape, n_instances)
    prefix = str(out_path)
    if prefix.endswith(".abr"):
        prefix = prefix[:-4]
    dtype = source.dtype(attr)
    fill = source.fill(attr)
    t_start = time.perf_counter()

    if strategy == "parallel":
        with _c.create_file(out_path, truncate=True) as view:
            view.create_virtual_dataset(dataset, dtype, source.shape, fill, [])
            view.commit()
        results = _run_workers(
            _virtual_parallel_task, n_instances,
            (source, str(out_path), prefix, dataset, plan, attr, lock_timeout),
            use_processes)
        mapping_writes = sum(r[2] for r in results.values())
    else:
        if use_processes:
            out: MpQueue = MpQueue()
            workers = [Process(target=_virtual_coordinator_task,
                               args=(out, i, source, str(out_path), prefix,
                                     dataset, plan, attr))
                       for i in range(n_instances)]
        else:
            out = queue.Queue()
            workers = [threading.Thread(target=_virtual_coordinator_task,
                                        args=(out, i, source, str(out_path),
                                              prefix, dataset, plan, attr))
                       for i in range(n_instances)]
        for w in workers:
            w.start()
        results, errors = {}, {}
        deadline = time.monotonic() + barrier_timeout
        for _ in range(n_instances):
            remaining = deadline - time.monotonic()
            try:
                status, instance, payload = out.get(timeout=max(remaining, 0.01))
            except queue.Empty:
                raise BarrierTimeoutError(
                    f"{n_instances - len(results) - len(errors)} instances "
                    f"missed the {barrier_timeout:.0f}s barrier") from None
            if status == "ok":
                results[instance] = payload
            else:
                errors[instance] = payload
        for w in workers:
            w.join()
        if errors:
            raise PartialSaveError(errors)
        # All slabs arrived: create the view once, in instance order.
        with _c.create_file(out_path, truncate=True) as view:
            view.create_virtual_dataset(
                dataset, dtype, source.shape, fill,
                [results[i][2] for i in range(n_instances)])
            view.commit()
        mapping_writes = n_instances

    return SaveReport(
        mode=f"virtual-{strategy}", n_instances=n_instances,
        paths=[os.path.abspath(out_path)] +
              [partition_path(prefix, i) for i in range(n_instances)],
        seconds=time.perf_counter() - t_start,
        bytes_written=sum(r[1] for r in results.values()),
        mappings_written=mapping_writes,
        instance_seconds=[results[i][0] for i in range(n_instances)])


# ---------------------------------------------------------------------------
# export formats

@dataclass
class ExportReport:
    path: str
    seconds: float
    bytes_written: int

    @property
    def throughput_mib_s(self) -> float:
        if self.seconds <= 0:
            return float("inf")
        return self.bytes_written / (1024 * 1024) / self.seconds


def format_cell(value, dtype: ElementType) -> str:
    """Shortest decimal that parses back to the same value."""
    if not dtype.is_float:
        return str(int(value))
    s = repr(float(value))
    if s.endswith(".0") and float(s[:-2]) == value:
        return s[:-2]
    return s


def export_csv(source: ArraySource, out_path) -> ExportReport:
    """Row-major cells, one line per cell; attributes comma-separated."""
    t0 = time.perf_counter()
    arrays = [(source.read_full(a).ravel(), t) for a, t in source.attrs]
    written = 0
    with open(out_path, "w") as f:
        step = 1 << 16
        n = arrays[0][0].size
        for start in range(0, n, step):
            stop = min(start + step, n)
            if len(arrays) == 1:
                arr, t = arrays[0]
                block = "\n".join(format_cell(v, t)
                                  for v in arr[start:stop].tolist())
            else:
                cols = [(a[start:stop].tolist(), t) for a, t in arrays]
                block = "\n".join(
                    ",".join(format_cell(col[i], t) for col, t in cols)
                    for i in range(stop - start))
            block += "\n"
            f.write(block)
            written += len(block)
    return ExportReport(str(out_path), time.perf_counter() - t0, written)


def import_csv(path, dtypes) -> list[np.ndarray]:
    dtypes = [ElementType(t) for t in dtypes]
    cols = [[] for _ in dtypes]
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            for col, piece, t in zip(cols, line.split(","), dtypes):
                col.append(float(piece) if t.is_float else int(piece))
    return [np.array(col, dtype=t.np_dtype) for col, t in zip(cols, dtypes)]


def export_binary(source: ArraySource, out_path) -> ExportReport:
    """Per cell, the raw little-endian attribute values concatenated in
    schema order; cells serialized row-major."""
    t0 = time.perf_counter()
    packed = np.dtype([(a, t.np_dtype) for a, t in source.attrs])
    rec = np.empty(source.cells, dtype=packed)
    for a, _ in source.attrs:
        rec[a] = source.read_full(a).ravel()
    with open(out_path, "wb") as f:
        f.write(rec.tobytes())
    return ExportReport(str(out_path), time.perf_counter() - t0, rec.nbytes)


def import_binary(path, dtypes) -> list[np.ndarray]:
    dtypes = [ElementType(t) for t in dtypes]
    packed = np.dtype([(f"a{i}", t.np_dtype) for i, t in enumerate(dtypes)])
    raw = open(path, "rb").read()
    if len(raw) % packed.itemsize:
        raise ValueError(f"{len(raw)} bytes is not a whole number of "
                         f"{packed.itemsize}-byte cells")
    rec = np.frombuffer(raw, dtype=packed)
    return [rec[f"a{i}"].copy() for i in range(len(dtypes))]


_OPAQUE_CHUNK_HEADER = struct.Struct("<QI")
_OPAQUE_SEGMENT_HEADER = struct.Struct("<QB")


def export_opaque(source: ArraySource, out_path, attr=None) -> ExportReport:
    """Run-length-encoded chunks dumped directly: per chunk an 8-byte
    linear index and segment count, then (length, same, payload) segments."""
    attr = attr or source.single_attr
    t0 = time.perf_counter()
    written = 0
    with open(out_path, "wb") as f:
        for lin, coord in enumerate(iter_chunk_starts(source.shape,
                                                      source.chunk_shape)):
            chunk = encode_rle(source.chunk_cells(coord, attr), coord)
            parts = [_OPAQUE_CHUNK_HEADER.pack(lin, len(chunk.segments))]
            for seg in chunk.segments:
                parts.append(_OPAQUE_SEGMENT_HEADER.pack(seg.length,
                                                         1 if seg.same else 0))
                parts.append(seg.data.tobytes())
            blob = b"".join(parts)
            f.write(blob)
            written += len(blob)
    return ExportReport(str(out_path), time.perf_counter() - t0, written)


def import_opaque(path, shape, chunk_shape, dtype, fill=0.0) -> np.ndarray:
    dtype = ElementType(dtype)
    shape = tuple(int(s) for s in shape)
    chunk_shape = tuple(int(c) for c in chunk_shape)
    coords = list(iter_chunk_starts(shape, chunk_shape))
    out = np.full(shape, fill, dtype=dtype.np_dtype)
    raw = open(path, "rb").read()
    pos = 0
    while pos < len(raw):
        lin, nseg = _OPAQUE_CHUNK_HEADER.unpack_from(raw, pos)
        pos += _OPAQUE_CHUNK_HEADER.size
        parts = []
        for _ in range(nseg):
            length, same = _OPAQUE_SEGMENT_HEADER.unpack_from(raw, pos)
            pos += _OPAQUE_SEGMENT_HEADER.size
            count = 1 if same else length
            data = np.frombuffer(raw, dtype=dtype.np_dtype, count=count,
                                 offset=pos)
            pos += count * dtype.itemsize
            parts.append(np.repeat(data, length) if same else data)
        cells = np.concatenate(parts).reshape(chunk_shape)
        coord = coords[lin]
        box = chunk_box(coord, chunk_shape, shape)
        sel = tuple(slice(s, s + c) for s, c in zip(box.start, box.count))
        out[sel] = cells[tuple(slice(0, c) for c in box.count)]
    return out
