import csv
import filecmp

import numpy as np
import pytest

from lipforge.cli import main
from lipforge.fieldio import read_lipx

DEFAULT = "domain.box = 0 1; 0 1\ngamma.shape.1 = exterior\nf.expr.1 = 0\npsi.expr = 1\nrun.imax = 3\n"
OUTPUTS = ["config.txt", "stack.json", "ledger.csv", "certificates.csv", "report.csv", "u.lipx"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "default.cfg"
    p.write_text(DEFAULT)
    return p


@pytest.fixture(scope="module")
def run_dir(config_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["build", str(config_file), "--out", str(out), "-q"]) == 0
    return out


def test_build_writes_every_artifact(run_dir):
    for name in OUTPUTS + ["timings.csv"]:
        assert (run_dir / name).stat().st_size > 0
    certs = {(r["name"], r["scale"]): r for r in _rows(run_dir / "certificates.csv")}
    assert certs[("boundary_exact", "final")]["pass"] == "true"
    assert all(r["pass"] == "true" for r in certs.values() if r["mode"] == "assert")
    assert [r["scale"] for r in _rows(run_dir / "report.csv")] == ["1", "2", "3"]
    ledger = _rows(run_dir / "ledger.csv")
    assert len(ledger) == sum(int(r["segments"]) for r in _rows(run_dir / "report.csv"))
    assert read_lipx(run_dir / "u.lipx").counts == (129, 129)


def test_rebuild_is_byte_identical(config_file, run_dir, tmp_path):
    assert main(["build", str(config_file), "--out", str(tmp_path), "-q"]) == 0
    match, mismatch, errors = filecmp.cmpfiles(run_dir, tmp_path, OUTPUTS, shallow=False)
    assert mismatch == [] and errors == []


def test_verify_recomputes_certificates(run_dir):
    assert main(["verify", str(run_dir), "-q"]) == 0
    assert (run_dir / "verify.csv").read_bytes() == (run_dir / "certificates.csv").read_bytes()


def test_report(run_dir, capsys):
    assert main(["report", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "boundary_exact" in out and "FAIL" not in out


def test_export_lattice_and_overrides(config_file, tmp_path):
    assert main(["build", str(config_file), "--out", str(tmp_path), "--imax", "1", "--seed", "5",
                 "--export-lattice", "9x5", "-q"]) == 0
    f = read_lipx(tmp_path / "u.lipx")
    assert f.counts == (9, 5)
    assert np.all(f.values == 0.0)  # scale 1 places no balls
    assert "run.seed = 5" in (tmp_path / "config.txt").read_text()


def test_precondition_failure_exits_3_with_witness(tmp_path, caplog):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(DEFAULT.replace("f.expr.1 = 0", "f.expr.1 = 2 * x"))
    assert main(["build", str(cfg), "--out", str(tmp_path / "run")]) == 3
    (row,) = _rows(tmp_path / "run" / "certificates.csv")
    assert row["name"] == "precondition" and row["pass"] == "false"
    assert float(row["measured"]) == pytest.approx(1.0)
    assert len(row["witness"].split()) == 2
    assert "precondition failed" in caplog.text


@pytest.mark.parametrize("text", ["domain.box = 0 1; 0 1\nbogus = 1\n", "domain.box = 0 1; 0 1\npsi.expr = (x\n"])
def test_config_errors_exit_2(tmp_path, capsys, text):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(text)
    assert main(["build", str(cfg), "--out", str(tmp_path / "run")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_missing_files_exit_2(tmp_path):
    assert main(["build", str(tmp_path / "nope.cfg"), "-q"]) == 2
    assert main(["verify", str(tmp_path), "-q"]) == 2


def test_bad_lattice_spec_exit_2(config_file, tmp_path):
    assert main(["build", str(config_file), "--out", str(tmp_path), "--export-lattice", "9by5", "-q"]) == 2


def test_baseline_subcommand(tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("domain.box = 0 1; 0 1\ngamma.shape.1 = points 0.5 0.5\nbaseline.h = 0.015625\n")
    assert main(["baseline", str(cfg), "--out", str(tmp_path / "b"), "-q"]) == 0
    fm = read_lipx(tmp_path / "b" / "baseline.lipx")
    assert fm.counts == (65, 65)
    assert fm.values[0, 32, 32] == 0.0
    assert (tmp_path / "b" / "mcshane.lipx").exists()
