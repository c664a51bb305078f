import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipforge.config import ConfigError, RunConfig, parse_config, serialize_config
from lipforge.expr import ParseError
from lipforge.fieldio import FieldFormatError, LatticeField, export_field, read_lipx, sample_lattice, write_lipx

BASIC = """\
# unit square, zero data
domain.box = 0 1; 0 1
gamma.shape.1 = exterior
gamma.shape.2 = disk 0.3 0.5 0.1
f.expr.1 = 0.1 * x * y
psi.expr = 1 + 0.5 * x
run.imax = 3
run.seed = 9
baseline.enabled = true
"""


# -- config -------------------------------------------------------------------------


def test_parse_basic():
    cfg = parse_config(BASIC)
    assert cfg.box == ((0.0, 1.0), (0.0, 1.0))
    assert cfg.gamma == (("exterior", ()), ("disk", (0.3, 0.5, 0.1)))
    assert cfg.imax == 3 and cfg.seed == 9 and cfg.baseline_enabled
    assert cfg.samples is None and cfg.tol_sub == 0.03
    assert cfg.domain().d == 2


def test_defaults_without_optional_keys():
    cfg = parse_config("domain.box = 0 2; -1 1\n")
    assert cfg.gamma == (("exterior", ()),)
    assert cfg.f == ("0.0",) and cfg.psi == "1.0"
    assert cfg.imax == 4 and cfg.seed == 42


def test_serialise_round_trip():
    cfg = parse_config(BASIC)
    text = serialize_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize_config(again) == text


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.5), st.integers(0, 12), st.integers(0, 2**31 - 1), st.floats(1e-6, 0.5))
def test_round_trip_property(r, imax, seed, tol):
    cfg = RunConfig(gamma=(("exterior", ()), ("disk", (0.5, 0.5, r))), imax=imax, seed=seed, tol_root=tol)
    assert parse_config(serialize_config(cfg)) == cfg


@pytest.mark.parametrize("text, line, col, match", [
    ("domain.box = 0 1; 0 1\nfoo = 3\n", 2, 1, "unknown key"),
    ("domain.box = 0 1; 0 1\nrun.imax = x\n", 2, 12, "bad value"),
    ("domain.box = 0 1\n", 1, 14, "dimension"),
    ("domain.box = 0 1; 1 0\n", 1, 14, "degenerate"),
    ("domain.box = 0 1; 0 1\ngamma.shape.1 = blob 1\n", 2, 17, "unknown shape"),
    ("domain.box = 0 1; 0 1\ngamma.shape.1 = disk 0.5 0.5\n", 2, 17, "wrong number"),
    ("domain.box = 0 1; 0 1\nrun.imax = 2\nrun.imax = 3\n", 3, 1, "duplicate"),
    ("domain.box = 0 1; 0 1\njust words\n", 2, 1, "key = value"),
])
def test_config_errors_carry_position(text, line, col, match):
    with pytest.raises(ConfigError, match=match) as info:
        parse_config(text)
    assert (info.value.line, info.value.col) == (line, col)


def test_expression_error_position():
    with pytest.raises(ParseError) as info:
        parse_config("domain.box = 0 1; 0 1\npsi.expr = 1 + * x\n")
    assert "line 2" in str(info.value)


def test_missing_box_and_nonpositive_psi():
    with pytest.raises(ConfigError, match="domain.box"):
        parse_config("run.imax = 2\n")
    with pytest.raises(ConfigError, match="positive"):
        parse_config("domain.box = 0 1; 0 1\npsi.expr = x - 0.5\n")


def test_overrides():
    cfg = parse_config(BASIC).with_overrides(imax=1, seed=None)
    assert cfg.imax == 1 and cfg.seed == 9


# -- LIPX -------------------------------------------------------------------------------


def test_zero_field_layout(tmp_path):
    p = tmp_path / "z.lipx"
    write_lipx(p, np.zeros((2, 2)), [0.0, 0.0], [1.0, 1.0])
    raw = p.read_bytes()
    # 4 magic + 3 u32 + 2 u32 counts + 2 f64 origin + 2 f64 spacing, then 4 f64 samples
    assert len(raw) == 56 + 32
    assert raw[:4] == b"LIPX"
    assert struct.unpack_from("<IIIII", raw, 4) == (1, 2, 1, 2, 2)
    assert raw[56:] == bytes(32)


def test_lipx_round_trip(tmp_path, rng):
    vals = rng.normal(size=(3, 4, 5, 2))
    p = tmp_path / "f.lipx"
    write_lipx(p, vals, [0.0, -1.0, 2.0], [0.5, 0.25, 1.0])
    f = read_lipx(p)
    assert np.array_equal(f.values, vals)
    assert f.counts == (4, 5, 2)
    assert np.array_equal(f.spacing, [0.5, 0.25, 1.0])


def test_lipx_rejects_truncation_and_bad_magic(tmp_path):
    p = tmp_path / "f.lipx"
    write_lipx(p, np.ones((3, 3)), [0.0, 0.0], 0.5)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(FieldFormatError, match="truncated payload"):
        read_lipx(p)
    p.write_bytes(raw[:20])
    with pytest.raises(FieldFormatError, match="truncated header"):
        read_lipx(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FieldFormatError, match="magic"):
        read_lipx(p)


def test_sample_lattice_of_linear_map(tmp_path):
    from lipforge.expr import MapExpr

    u = MapExpr.parse(["x + 2 * y", "x * y"], 2)
    f = sample_lattice(u, [0, 0], [1, 1], (5, 3))
    assert f.values.shape == (2, 5, 3)
    P = f.points()
    assert np.allclose(f.values[0].ravel(), P[:, 0] + 2 * P[:, 1])
    export_field(f, tmp_path / "u.lipx")
    g = read_lipx(tmp_path / "u.lipx")
    assert isinstance(g, LatticeField) and np.array_equal(g.values, f.values)
