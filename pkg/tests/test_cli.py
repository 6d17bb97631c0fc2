import os

import numpy as np
import pytest

from abridge import container as c
from abridge.cli import main
from abridge.catalog import Catalog
from conftest import write_array


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def make_ones_array(workdir, name="array1", cells=1000, chunk=100):
    h = c.create_file("data1.abr")
    write_array(h, "/val1", np.ones(cells), (chunk,))
    h.commit()
    h.close()
    rc = main(["create", name, "--shape", str(cells), "--chunk", str(chunk),
               "--dtype", "f64", "--bind", "val1=data1.abr:/val1"])
    assert rc == 0


def test_create_registers_catalog_entry(workdir, capsys):
    make_ones_array(workdir)
    entry = Catalog("catalog.json").entry("array1")
    assert entry.schema.shape == (1000,)
    assert entry.bindings["val1"] == ("data1.abr", "/val1")


def test_create_duplicate_name_nonzero_exit(workdir, capsys):
    make_ones_array(workdir)
    rc = main(["create", "array1", "--shape", "1000", "--chunk", "100",
               "--bind", "val1=data1.abr:/val1"])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_create_missing_bind_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["create", "x", "--shape", "10", "--chunk", "10"])
    assert exc.value.code == 2


def test_create_malformed_binding_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["create", "x", "--shape", "10", "--chunk", "10",
              "--bind", "not-a-binding"])
    assert exc.value.code == 2


def test_scan_sum_prints_million(workdir, capsys):
    make_ones_array(workdir, cells=10**6, chunk=10**5)
    capsys.readouterr()
    rc = main(["scan", "array1", "--agg", "sum", "-n", "8"])
    assert rc == 0
    assert capsys.readouterr().out.splitlines()[0] == "1000000"


def test_scan_region_equals_full_when_region_is_shape(workdir, capsys):
    make_ones_array(workdir)
    capsys.readouterr()
    main(["scan", "array1", "--agg", "sum"])
    full = capsys.readouterr().out.splitlines()[0]
    main(["scan", "array1", "--agg", "sum", "--region", "0:1000"])
    region = capsys.readouterr().out.splitlines()[0]
    assert full == region == "1000"


def test_scan_csv_emits_exact_header(workdir, capsys):
    make_ones_array(workdir)
    rc = main(["scan", "array1", "--agg", "sum", "-n", "2", "--csv"])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert ("instances,coordinator_s,scan_s,aggregate_s,"
            "redistribute_s,bytes_redistributed") in lines
    row = lines[lines.index("instances,coordinator_s,scan_s,aggregate_s,"
                            "redistribute_s,bytes_redistributed") + 1]
    assert row.startswith("2,")


def test_scan_filter(workdir, capsys):
    h = c.create_file("e.abr")
    write_array(h, "/E", np.linspace(0, 4, 100), (10,))
    h.commit()
    h.close()
    main(["create", "energies", "--shape", "100", "--chunk", "10",
          "--bind", "E=e.abr:/E"])
    capsys.readouterr()
    rc = main(["scan", "energies", "--agg", "count", "--filter", "E>2.0"])
    assert rc == 0
    out = capsys.readouterr().out.splitlines()[0]
    assert out == str(int((np.linspace(0, 4, 100) > 2.0).sum()))


def test_save_virtual_coordinator_prints_mapping_count(workdir, capsys):
    make_ones_array(workdir)
    rc = main(["save", "array1", "--mode", "virtual", "--mapping",
               "coordinator", "-n", "4", "-o", "view.abr"])
    assert rc == 0
    assert "mappings_written=4" in capsys.readouterr().out


def test_save_virtual_parallel_prints_mapping_count(workdir, capsys):
    make_ones_array(workdir)
    rc = main(["save", "array1", "--mode", "virtual", "--mapping",
               "parallel", "-n", "4", "-o", "view.abr"])
    assert rc == 0
    assert "mappings_written=10" in capsys.readouterr().out


def test_save_mapping_with_serial_usage_error(workdir):
    make_ones_array(workdir)
    with pytest.raises(SystemExit) as exc:
        main(["save", "array1", "--mode", "serial", "--mapping", "parallel",
              "-o", "x.abr"])
    assert exc.value.code == 2


def test_save_formats(workdir, capsys):
    make_ones_array(workdir, cells=100, chunk=10)
    assert main(["save", "array1", "--format", "binary", "-o", "a.bin"]) == 0
    assert os.path.getsize("a.bin") == 800
    assert main(["save", "array1", "--format", "csv", "-o", "a.csv"]) == 0
    assert open("a.csv").read().splitlines()[0] == "1"
    assert main(["save", "array1", "--format", "opaque", "-o", "a.opq"]) == 0


def test_version_cli_flow(workdir, capsys):
    v0 = np.arange(1000.0)
    open("in0.bin", "wb").write(v0.tobytes())
    rc = main(["version", "v.abr", "speed", "--strategy", "chunk-mosaic",
               "--from", "in0.bin", "--shape", "1000", "--chunk", "100"])
    assert rc == 0
    v1 = v0.copy()
    v1[123] = -5.0
    open("in1.bin", "wb").write(v1.tobytes())
    rc = main(["version", "v.abr", "speed", "--strategy", "chunk-mosaic",
               "--from", "in1.bin"])
    assert rc == 0
    capsys.readouterr()

    rc = main(["version", "v.abr", "speed", "--list"])
    assert rc == 0
    assert capsys.readouterr().out.strip() == "V0 V1"

    rc = main(["version", "v.abr", "speed", "--read", "V0", "-o", "out0.bin"])
    assert rc == 0
    back = np.frombuffer(open("out0.bin", "rb").read())
    assert np.array_equal(back, v0)


def test_version_strategy_typo_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["version", "v.abr", "speed", "--strategy", "copy-on-write",
              "--from", "x.bin"])
    assert exc.value.code == 2


def test_version_read_without_output_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        main(["version", "v.abr", "speed", "--read", "V0"])
    assert exc.value.code == 2


def test_bench_scan_rows_share_result(workdir, capsys):
    rc = main(["bench", "scan", "--size", "1MiB", "-n", "1,2",
               "--repeat", "2", "--seed", "7"])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    rows = [l for l in lines if l.startswith("scan,")]
    assert len(rows) == 2
    results = {row.split(",")[-1] for row in rows}
    assert len(results) == 1  # correctness independent of n


def test_bench_version_proportionality(workdir, capsys):
    rc = main(["bench", "version", "--size", "2MiB", "--repeat", "1",
               "--seed", "3"])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    added = {}
    for line in lines:
        if line.startswith("version,"):
            _, strategy, pct, updated, bytes_added, _ = line.split(",")
            added[(strategy, int(pct))] = int(bytes_added)
    full = added[("full-copy", 1)]
    assert added[("chunk-mosaic", 1)] <= full * 2 // 100 + 1
    assert added[("chunk-mosaic", 100)] == added[("full-copy", 100)]


def test_bench_is_deterministic_given_seed(workdir, capsys):
    main(["bench", "scan", "--size", "1MiB", "-n", "2", "--repeat", "1",
          "--seed", "11"])
    first = [l.split(",")[-1] for l in capsys.readouterr().out.splitlines()
             if l.startswith("scan,")]
    main(["bench", "scan", "--size", "1MiB", "-n", "2", "--repeat", "1",
          "--seed", "11"])
    second = [l.split(",")[-1] for l in capsys.readouterr().out.splitlines()
              if l.startswith("scan,")]
    assert first == second
