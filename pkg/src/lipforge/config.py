"""Line-oriented ``key = value`` run configuration."""

import re
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import qmc

from .expr import MapExpr, ParseError, parse_expr
from .geometry import make_domain

SHAPE_KINDS = ("exterior", "halfspace", "box", "disk", "sphere", "points", "segments")
_KEY = re.compile(r"^(domain\.box|gamma\.shape\.(\d+)|f\.expr\.(\d+)|psi\.expr|run\.imax|run\.tol_root|run\.tol_sub"
                  r"|run\.samples|run\.seed|out\.dir|baseline\.enabled|baseline\.h)$")


class ConfigError(ValueError):
    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {col}" if col is not None else "") + ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class RunConfig:
    box: tuple = ((0.0, 1.0), (0.0, 1.0))
    gamma: tuple = (("exterior", ()),)
    f: tuple = ("0.0",)
    psi: str = "1.0"
    imax: int = 4
    tol_root: float = 1e-3
    tol_sub: float = 0.03
    samples: int | None = None
    seed: int = 42
    out_dir: str = "run"
    baseline_enabled: bool = False
    baseline_h: float = 1.0 / 256

    @property
    def d(self):
        return len(self.box)

    def domain(self):
        shapes = []
        exterior = False
        for kind, params in self.gamma:
            if kind == "exterior":
                exterior = True
            else:
                shapes.append(_shape_tuple(kind, params, self.d))
        return make_domain({"box": self.box, "gamma": shapes, "exterior": exterior})

    def f_map(self):
        return MapExpr.parse(list(self.f), self.d)

    def psi_map(self):
        return MapExpr.parse(self.psi, self.d)

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _shape_tuple(kind, params, d):
    p = np.asarray(params, float)
    if kind == "halfspace":
        return ("halfspace", p[:d], p[d])
    if kind == "box":
        return ("box", p[:d], p[d:2 * d])
    if kind in ("disk", "sphere"):
        return (kind, p[:d], p[d])
    if kind == "points":
        return ("points", p.reshape(-1, d))
    if kind == "segments":
        q = p.reshape(-1, 2 * d)
        return ("segments", q[:, :d], q[:, d:])
    raise ValueError(kind)


def _shape_arity(kind, d):
    return {"exterior": (0, 0), "halfspace": (d + 1, 0), "box": (2 * d, 0), "disk": (d + 1, 0),
            "sphere": (d + 1, 0), "points": (0, d), "segments": (0, 2 * d)}[kind]


def _floats(text, line, col):
    out = []
    for m in re.finditer(r"\S+", text):
        try:
            v = float(m.group())
        except ValueError:
            raise ConfigError(f"expected a number, got {m.group()!r}", line, col + m.start()) from None
        if not np.isfinite(v):
            raise ConfigError(f"non-finite number {m.group()!r}", line, col + m.start())
        out.append(v)
    return out


def _fmt(v):
    return repr(float(v))


def parse_config(text, check_psi=True):
    """Parse and validate a configuration; errors carry line and column."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    raw = {}
    where = {}
    for ln, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0]
        if not body.strip():
            continue
        if "=" not in body:
            col = len(body) - len(body.lstrip()) + 1
            raise ConfigError("expected 'key = value'", ln, col)
        key_part, value = body.split("=", 1)
        key = key_part.strip()
        kcol = len(key_part) - len(key_part.lstrip()) + 1
        if not _KEY.match(key):
            raise ConfigError(f"unknown key {key!r}", ln, kcol)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", ln, kcol)
        vcol = len(key_part) + 2 + (len(value) - len(value.lstrip()))
        raw[key] = value.strip()
        where[key] = (ln, vcol)

    def num(key, cast, default):
        if key not in raw:
            return default
        ln, col = where[key]
        try:
            return cast(raw[key])
        except ValueError:
            raise ConfigError(f"bad value {raw[key]!r} for {key}", ln, col) from None

    if "domain.box" not in raw:
        raise ConfigError("missing key 'domain.box'")
    ln, col = where["domain.box"]
    box = []
    for part in raw["domain.box"].split(";"):
        vals = _floats(part, ln, col)
        if len(vals) != 2:
            raise ConfigError("domain.box needs 'lo hi' pairs separated by ';'", ln, col)
        box.append(tuple(vals))
    d = len(box)
    if d < 2:
        raise ConfigError(f"dimension must be >= 2, got {d}", ln, col)
    if any(hi <= lo for lo, hi in box):
        raise ConfigError("box is degenerate (need lo < hi on every axis)", ln, col)

    gamma = []
    shape_keys = sorted((int(_KEY.match(k).group(2)), k) for k in raw if k.startswith("gamma.shape."))
    for _, key in shape_keys:
        ln, col = where[key]
        kind, _, rest = raw[key].partition(" ")
        if kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape {kind!r}", ln, col)
        vals = _floats(rest.replace(";", " "), ln, col + len(kind) + 1)
        fixed, per = _shape_arity(kind, d)
        if (fixed and len(vals) != fixed) or (per and (not vals or len(vals) % per)) or (not fixed and not per and vals):
            raise ConfigError(f"wrong number of parameters for {kind} in dimension {d}", ln, col)
        gamma.append((kind, tuple(vals)))
    if not gamma:
        gamma = [("exterior", ())]

    f_keys = sorted((int(_KEY.match(k).group(3)), k) for k in raw if k.startswith("f.expr."))
    if f_keys and [k for k, _ in f_keys] != list(range(1, len(f_keys) + 1)):
        raise ConfigError("f.expr keys must be numbered 1..D")
    f_texts = []
    for _, key in f_keys or [(1, None)]:
        f_texts.append(_expr(raw, where, key, "0", d))
    psi_text = _expr(raw, where, "psi.expr" if "psi.expr" in raw else None, "1", d)

    samples = None
    if "run.samples" in raw and raw["run.samples"] != "auto":
        samples = num("run.samples", int, None)
        if samples < 64:
            raise ConfigError("run.samples must be >= 64", *where["run.samples"])
    enabled = raw.get("baseline.enabled", "false").lower()
    if enabled not in ("true", "false"):
        raise ConfigError("baseline.enabled must be true or false", *where["baseline.enabled"])
    cfg = RunConfig(
        box=tuple(box),
        gamma=tuple(gamma),
        f=tuple(f_texts),
        psi=psi_text,
        imax=num("run.imax", int, 4),
        tol_root=num("run.tol_root", float, 1e-3),
        tol_sub=num("run.tol_sub", float, 0.03),
        samples=samples,
        seed=num("run.seed", int, 42),
        out_dir=raw.get("out.dir", "run"),
        baseline_enabled=enabled == "true",
        baseline_h=num("baseline.h", float, 1.0 / 256),
    )
    for key, v in (("run.tol_root", cfg.tol_root), ("run.tol_sub", cfg.tol_sub), ("baseline.h", cfg.baseline_h)):
        if not v > 0:
            raise ConfigError(f"{key} must be > 0", *where.get(key, (None, None)))
    if cfg.imax < 0:
        raise ConfigError("run.imax must be >= 0", *where.get("run.imax", (None, None)))
    try:
        cfg.domain()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if check_psi:
        check_psi_positive(cfg)
    return cfg


def _expr(raw, where, key, default, d):
    if key is None:
        return parse_expr(default).text()
    ln, col = where[key]
    try:
        node = parse_expr(raw[key])
        MapExpr([node], d)
    except ParseError as err:
        raise err.at_line(ln, col - 1) from None
    except ValueError as err:
        raise ConfigError(str(err), ln, col) from None
    return node.text()


def check_psi_positive(cfg, n=4096):
    """psi > 0 at Halton samples and corners of the box."""
    lo = np.array([b[0] for b in cfg.box])
    hi = np.array([b[1] for b in cfg.box])
    eng = qmc.Halton(cfg.d, scramble=False)
    X = lo + (hi - lo) * eng.random(n)
    corners = np.array(np.meshgrid(*[[a, b] for a, b in cfg.box], indexing="ij")).reshape(cfg.d, -1).T
    X = np.vstack([X, corners])
    v = cfg.psi_map().scalar(X)
    k = int(np.argmin(v))
    if not v[k] > 0:
        pt = ", ".join(f"{c:.6g}" for c in X[k])
        raise ConfigError(f"ψ must be positive: psi({pt}) = {v[k]:.6g}")


def serialize_config(cfg):
    lines = ["domain.box = " + "; ".join(f"{_fmt(a)} {_fmt(b)}" for a, b in cfg.box)]
    for k, (kind, params) in enumerate(cfg.gamma, 1):
        lines.append(f"gamma.shape.{k} = " + " ".join([kind] + [_fmt(v) for v in params]))
    for k, text in enumerate(cfg.f, 1):
        lines.append(f"f.expr.{k} = {text}")
    lines.append(f"psi.expr = {cfg.psi}")
    lines.append(f"run.imax = {cfg.imax}")
    lines.append(f"run.tol_root = {_fmt(cfg.tol_root)}")
    lines.append(f"run.tol_sub = {_fmt(cfg.tol_sub)}")
    lines.append(f"run.samples = {'auto' if cfg.samples is None else cfg.samples}")
    lines.append(f"run.seed = {cfg.seed}")
    lines.append(f"out.dir = {cfg.out_dir}")
    lines.append(f"baseline.enabled = {'true' if cfg.baseline_enabled else 'false'}")
    lines.append(f"baseline.h = {_fmt(cfg.baseline_h)}")
    return "\n".join(lines) + "\n"
