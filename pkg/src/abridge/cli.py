"""abridge command line: register, scan, save, version, bench.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

import argparse
import os
import sys

import numpy as np

from . import bench as _bench
from . import container as _c
from . import query, save
from . import timetravel as tt
from .catalog import ArraySchema, Catalog
from .container import ElementType, Hyperslab
from .errors import AbridgeError
from .sources import ContainerSource

DEFAULT_CATALOG = "catalog.json"
DEFAULT_INSTANCES = 4


def _dims(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(","))


def _parse_binding(text: str):
    attr, sep, rest = text.partition("=")
    if not sep or not attr:
        raise ValueError(f"binding {text!r} is not attr=file:dataset")
    file, sep, dataset = rest.rpartition(":")
    if not sep or not file or not dataset:
        raise ValueError(f"binding {text!r} is not attr=file:dataset")
    return attr, file, dataset


def _parse_region(text: str) -> Hyperslab:
    starts, counts = [], []
    for piece in text.split(","):
        lo, sep, hi = piece.partition(":")
        if not sep:
            raise ValueError(f"region piece {piece!r} is not start:stop")
        lo, hi = int(lo), int(hi)
        if hi <= lo:
            raise ValueError(f"empty region piece {piece!r}")
        starts.append(lo)
        counts.append(hi - lo)
    return Hyperslab(starts, counts)


def _parse_size(text: str) -> int:
    units = {"kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30}
    lowered = text.strip().lower()
    for suffix, mult in units.items():
        if lowered.endswith(suffix):
            return int(float(lowered[:-len(suffix)]) * mult)
    return int(lowered)


def _filter_attr(expr: str) -> str:
    for op in ("<=", ">=", "==", "!=", "<", ">"):
        if op in expr:
            return expr.partition(op)[0].strip()
    raise ValueError(f"cannot parse predicate {expr!r}")


def cmd_create(args, parser) -> int:
    bindings = {}
    try:
        for spec in args.bind:
            attr, file, dataset = _parse_binding(spec)
            bindings[attr] = (file, dataset)
    except ValueError as exc:
        parser.error(str(exc))
    dtypes = args.dtype.split(",")
    if len(dtypes) == 1:
        dtypes = dtypes * len(bindings)
    if len(dtypes) != len(bindings):
        parser.error("--dtype count does not match bindings")
    schema = ArraySchema(args.name, _dims(args.shape), _dims(args.chunk),
                         list(zip(bindings, dtypes)))
    Catalog(args.catalog).register_external_array(args.name, schema, bindings)
    print(f"registered {args.name}")
    return 0


def _print_result(result):
    if isinstance(result, dict):
        for coord, value in sorted(result.items()):
            label = ",".join(str(c) for c in coord)
            print(f"[{label}] {_fmt_value(value)}")
    else:
        print(_fmt_value(result))


def _fmt_value(value) -> str:
    if value is None:
        return "empty"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return save.format_cell(float(value), ElementType.f64)


def cmd_scan(args, parser) -> int:
    func, _, value_attr = args.agg.partition(":")
    cat = Catalog(args.catalog)
    entry = cat.entry(args.name)
    attr = value_attr or entry.schema.attributes[0][0]
    attrs = [attr]
    predicate = None
    if args.filter:
        predicate = args.filter
        fattr = _filter_attr(args.filter)
        if fattr not in attrs:
            if args.region:
                parser.error("--region queries can only filter on the "
                             "scanned attribute")
            attrs.append(fattr)
    spec = query.AggregateSpec(func, value=attr, predicate=predicate,
                               grid=_dims(args.grid) if args.grid else None)
    if args.region:
        region = _parse_region(args.region)
        result, timings = query.aggregate_region(
            cat, args.name, attr, region, spec, args.n_instances,
            tile_size=args.tile)
    else:
        result, timings = query.aggregate(cat, args.name, attrs, spec,
                                          args.n_instances,
                                          tile_size=args.tile)
    _print_result(result)
    if args.csv:
        print(query.PhaseTimings.CSV_HEADER)
        print(timings.csv_row(args.n_instances))
    else:
        print(f"coordinator={timings.coordinator_s:.4f}s "
              f"scan={timings.scan_s:.4f}s "
              f"aggregate={timings.aggregate_s:.4f}s "
              f"redistribute={timings.redistribute_s:.4f}s "
              f"bytes={timings.bytes_redistributed}")
    return 0


def cmd_save(args, parser) -> int:
    if args.mapping and args.mode != "virtual":
        parser.error("--mapping only applies to --mode virtual")
    cat = Catalog(args.catalog)
    source = ContainerSource(cat.resolved_bindings(args.name))
    attr = args.attr or source.single_attr

    if args.format == "csv":
        report = save.export_csv(source, args.output)
    elif args.format == "binary":
        report = save.export_binary(source, args.output)
    elif args.format == "opaque":
        report = save.export_opaque(source, args.output, attr=attr)
    else:
        if args.mode == "serial":
            report = save.save_serial(source, args.output,
                                      n_instances=args.n_instances, attr=attr)
        elif args.mode == "partitioned":
            report = save.save_partitioned(source, args.output,
                                           args.n_instances, attr=attr,
                                           use_processes=args.processes)
        else:
            report = save.save_virtual(source, args.output, args.n_instances,
                                       args.mapping or "coordinator",
                                       attr=attr,
                                       use_processes=args.processes)
            print(f"mappings_written={report.mappings_written}")
    source.close()
    print(f"wrote {report.bytes_written} bytes in {report.seconds:.3f}s")
    return 0


def cmd_version(args, parser) -> int:
    actions = sum(bool(a) for a in (args.from_, args.list, args.read))
    if actions != 1:
        parser.error("exactly one of --from, --list, --read is required")

    if args.list:
        with _c.open_file(args.file, "r") as handle:
            ids = tt.list_versions(handle, args.name)
        print(" ".join(tt.version_label(k) for k in ids))
        return 0

    if args.read:
        label = args.read.upper()
        if not label.startswith("V") or not label[1:].isdigit():
            parser.error(f"--read expects V<k>, got {args.read!r}")
        if not args.output:
            parser.error("--read requires -o")
        with _c.open_file(args.file, "r") as handle:
            data = tt.read_version(handle, args.name, int(label[1:]))
        with open(args.output, "wb") as f:
            f.write(np.ascontiguousarray(data).tobytes())
        print(f"wrote {data.nbytes} bytes")
        return 0

    dtype = ElementType(args.dtype)
    raw = save.import_binary(args.from_, [dtype])[0]
    exists = os.path.exists(args.file)
    if exists:
        handle = _c.open_file(args.file, "w")
    else:
        handle = _c.create_file(args.file)
    try:
        latest = "/" + args.name.lstrip("/")
        if handle.has_dataset(latest):
            shape = handle.dataset(latest).shape
            chunk = handle.dataset(latest).chunk_shape
        else:
            if not args.shape or not args.chunk:
                parser.error("--shape and --chunk are required for the "
                             "first version")
            shape, chunk = _dims(args.shape), _dims(args.chunk)
        expected = 1
        for s in shape:
            expected *= s
        if raw.size != expected:
            raise AbridgeError(f"input holds {raw.size} cells, dataset "
                               f"shape {shape} needs {expected}")
        data = raw.reshape(shape)
        if args.strategy == "full-copy":
            vid = tt.save_version_full_copy(handle, args.name, data,
                                            chunk_shape=chunk,
                                            dtype=dtype.value)
        else:
            vid = tt.save_version_chunk_mosaic(handle, args.name, data,
                                               chunk_shape=chunk,
                                               dtype=dtype.value)
    finally:
        handle.close()
    print(f"saved {tt.version_label(vid)}")
    return 0


def cmd_bench(args, parser) -> int:
    ns = [int(n) for n in args.n_instances.split(",")]
    size = _parse_size(args.size)
    if args.experiment == "scan":
        print(_bench.SCAN_HEADER)
        rows = _bench.bench_scan(size, ns, repeat=args.repeat, seed=args.seed,
                                 base_dir=args.workdir)
    elif args.experiment == "save":
        print(_bench.SAVE_HEADER)
        rows = _bench.bench_save(size, ns, repeat=args.repeat, seed=args.seed,
                                 rle_friendly=args.rle_friendly,
                                 use_processes=args.processes,
                                 base_dir=args.workdir)
    else:
        print(_bench.VERSION_HEADER)
        rows = _bench.bench_version(size, repeat=args.repeat, seed=args.seed,
                                    base_dir=args.workdir)
    for row in rows:
        print(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abridge",
        description="chunked array containers: scan, save, time travel")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("create", help="register an external array")
    p.add_argument("name")
    p.add_argument("--shape", required=True, help="e.g. 1000 or 4,4")
    p.add_argument("--chunk", required=True, help="e.g. 100 or 2,2")
    p.add_argument("--dtype", default="f64",
                   help="one type, or comma list per binding")
    p.add_argument("--bind", action="append", required=True,
                   metavar="ATTR=FILE:DATASET")
    p.add_argument("--catalog", default=DEFAULT_CATALOG)

    p = sub.add_parser("scan", help="aggregate an external array")
    p.add_argument("name")
    p.add_argument("--agg", default="sum", help="sum|count|min|max|avg[:attr]")
    p.add_argument("--region", help="start:stop[,start:stop...]")
    p.add_argument("--filter", help='e.g. "E>2.0"')
    p.add_argument("--grid", help="grid cell shape for grouped output")
    p.add_argument("-n", "--n-instances", type=int, default=DEFAULT_INSTANCES)
    p.add_argument("--tile", type=int, default=query.DEFAULT_TILE)
    p.add_argument("--csv", action="store_true",
                   help="emit the phase-timing CSV")
    p.add_argument("--catalog", default=DEFAULT_CATALOG)

    p = sub.add_parser("save", help="materialize an external array")
    p.add_argument("name")
    p.add_argument("--mode", choices=["serial", "partitioned", "virtual"],
                   default="serial")
    p.add_argument("--mapping", choices=["parallel", "coordinator"])
    p.add_argument("--format", choices=["abr", "csv", "binary", "opaque"],
                   default="abr")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("-n", "--n-instances", type=int, default=DEFAULT_INSTANCES)
    p.add_argument("--attr")
    p.add_argument("--processes", action="store_true",
                   help="process workers instead of threads")
    p.add_argument("--catalog", default=DEFAULT_CATALOG)

    p = sub.add_parser("version", help="versioned saves and time travel")
    p.add_argument("file")
    p.add_argument("name")
    p.add_argument("--strategy", choices=["full-copy", "chunk-mosaic"],
                   default="chunk-mosaic")
    p.add_argument("--from", dest="from_", metavar="INPUT.bin",
                   help="binary input for a new version")
    p.add_argument("--list", action="store_true")
    p.add_argument("--read", metavar="Vk")
    p.add_argument("-o", "--output")
    p.add_argument("--shape")
    p.add_argument("--chunk")
    p.add_argument("--dtype", default="f64")

    p = sub.add_parser("bench", help="benchmark grids, CSV output")
    p.add_argument("experiment", choices=["scan", "save", "version"])
    p.add_argument("--size", default="64MiB")
    p.add_argument("-n", "--n-instances", default="1,2,4,8")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rle-friendly", action="store_true")
    p.add_argument("--processes", action="store_true")
    p.add_argument("--workdir")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"create": cmd_create, "scan": cmd_scan, "save": cmd_save,
                "version": cmd_version, "bench": cmd_bench}
    try:
        return handlers[args.command](args, parser)
    except (AbridgeError, OSError, ValueError) as exc:
        print(f"abridge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
