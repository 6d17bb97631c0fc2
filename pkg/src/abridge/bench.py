"""Desk-scale benchmark grids with CSV output.

Each bench generates seeded synthetic data, runs an experiment grid, and
reports the median over --repeat runs. Rows are plain CSV on stdout so
they can be collected across machines.
"""

import os
import shutil
import statistics
import tempfile
import time
from contextlib import contextmanager

import numpy as np

from . import container as _c
from . import query, save
from . import timetravel as tt
from .catalog import ArraySchema, Catalog
from .container import ElementType
from .sources import ContainerSource, SyntheticSource

SCAN_HEADER = "bench,n,repeat,median_s,result"
SAVE_HEADER = "bench,mode,n,repeat,median_s,throughput_mib_s,mappings_written"
VERSION_HEADER = ("bench,strategy,pct_chunks,chunks_updated,bytes_added,"
                  "median_s")


def synthetic_1d(size_bytes: int, chunk_bytes: int, seed: int = 0,
                 rle_friendly: bool = False) -> SyntheticSource:
    cells = size_bytes // 8
    chunk = max(chunk_bytes // 8, 1)
    return SyntheticSource((cells,), (chunk,), seed=seed,
                           run_length=4096 if rle_friendly else 1)


@contextmanager
def _workdir(base=None):
    d = tempfile.mkdtemp(prefix="abridge-bench-", dir=base)
    try:
        yield d
    finally:
        shutil.rmtree(d, ignore_errors=True)


def _median(samples):
    return statistics.median(samples)


def bench_scan(size_bytes, n_list, repeat=3, seed=0, chunk_bytes=16 << 20,
               base_dir=None):
    """Full-scan sum over one dataset for each instance count."""
    rows = []
    with _workdir(base_dir) as d:
        source = synthetic_1d(size_bytes, min(chunk_bytes, size_bytes), seed)
        save.save_serial(source, os.path.join(d, "scan.abr"))
        cat = Catalog(os.path.join(d, "catalog.json"))
        schema = ArraySchema("bench", source.shape, source.chunk_shape,
                             [("v0", "f64")])
        cat.register_external_array("bench", schema,
                                    {"v0": ("scan.abr", "/data")})
        spec = query.AggregateSpec("sum")
        for n in n_list:
            samples, result = [], None
            for _ in range(repeat):
                t0 = time.perf_counter()
                result, _timings = query.aggregate(cat, "bench", ["v0"],
                                                   spec, n)
                samples.append(time.perf_counter() - t0)
            rows.append(f"scan,{n},{repeat},{_median(samples):.6f},"
                        f"{save.format_cell(result, ElementType.f64)}")
    return rows


def bench_save(size_bytes, n_list, repeat=3, seed=0, chunk_bytes=16 << 20,
               rle_friendly=False, use_processes=False, base_dir=None):
    """Serial / partitioned / virtual save plus the export formats.

    The data being saved is first materialized into a container (untimed),
    so the grid measures the write paths, not synthetic generation.
    """
    rows = []
    # Every instance count in the grid needs at least one chunk row.
    chunk_bytes = max(min(chunk_bytes, size_bytes // max(n_list)), 64)
    generator = synthetic_1d(size_bytes, chunk_bytes, seed, rle_friendly)
    staging = tempfile.mkdtemp(prefix="abridge-bench-base-", dir=base_dir)
    base_path = os.path.join(staging, "base.abr")
    save.save_serial(generator, base_path)
    source = ContainerSource({"v0": (base_path, "/data")})
    for n in n_list:
        grid = [("serial", lambda d: save.save_serial(
                    source, os.path.join(d, "s.abr"), n_instances=n,
                    use_processes=use_processes)),
                ("partitioned", lambda d: save.save_partitioned(
                    source, os.path.join(d, "p"), n,
                    use_processes=use_processes)),
                ("virtual-coordinator", lambda d: save.save_virtual(
                    source, os.path.join(d, "v.abr"), n, "coordinator",
                    use_processes=use_processes)),
                ("virtual-parallel", lambda d: save.save_virtual(
                    source, os.path.join(d, "vp.abr"), n, "parallel",
                    use_processes=use_processes))]
        for mode, run in grid:
            samples, report = [], None
            for _ in range(repeat):
                with _workdir(base_dir) as d:
                    report = run(d)
                samples.append(report.seconds)
            med = _median(samples)
            thr = size_bytes / (1 << 20) / med if med > 0 else float("inf")
            rows.append(f"save,{mode},{n},{repeat},{med:.6f},{thr:.1f},"
                        f"{report.mappings_written}")
    for fmt, run in (("csv", save.export_csv), ("binary", save.export_binary),
                     ("opaque", save.export_opaque)):
        samples = []
        for _ in range(repeat):
            with _workdir(base_dir) as d:
                rep = run(source, os.path.join(d, "out." + fmt))
            samples.append(rep.seconds)
        med = _median(samples)
        thr = size_bytes / (1 << 20) / med if med > 0 else float("inf")
        rows.append(f"save,export-{fmt},1,{repeat},{med:.6f},{thr:.1f},0")
    source.close()
    shutil.rmtree(staging, ignore_errors=True)
    return rows


def bench_version(size_bytes, pct_list=(1, 10, 50, 100), repeat=3, seed=0,
                  n_chunks=200, base_dir=None):
    """Bytes and time per version save, mosaic vs full copy."""
    rows = []
    chunk_cells = max(size_bytes // 8 // n_chunks, 1)
    cells = chunk_cells * n_chunks
    rng = np.random.default_rng(seed)
    base = SyntheticSource((cells,), (chunk_cells,), seed=seed)
    v0 = base.read_full()
    for pct in pct_list:
        updated = max(1, (n_chunks * pct) // 100)
        picks = rng.choice(n_chunks, size=updated, replace=False)
        v1 = v0.copy()
        for p in picks:
            v1[p * chunk_cells] += 1.0
        for strategy, fn in (("chunk-mosaic", tt.save_version_chunk_mosaic),
                             ("full-copy", tt.save_version_full_copy)):
            samples, added = [], None
            for _ in range(repeat):
                with _workdir(base_dir) as d:
                    with _c.create_file(os.path.join(d, "v.abr")) as handle:
                        fn(handle, "speed", v0, chunk_shape=(chunk_cells,))
                        t0 = time.perf_counter()
                        fn(handle, "speed", v1)
                        samples.append(time.perf_counter() - t0)
                        added = tt.version_data_bytes(handle, "speed", 0)
            rows.append(f"version,{strategy},{pct},{updated},{added},"
                        f"{_median(samples):.6f}")
    return rows
