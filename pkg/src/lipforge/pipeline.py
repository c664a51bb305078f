"""Run orchestration: construction, verification, baselines and the files
they leave in a run directory.

A run directory holds

    config.txt          canonical configuration
    stack.json          base expressions and every bump (floats round-trip)
    ledger.csv          one row per recorded segment
    certificates.csv    name, scale, bound, measured, pass, witness, mode
    report.csv          one row per scale
    timings.csv         wall-clock seconds per stage (kept apart so the
                        other CSVs are byte-identical across reruns)
    u.lipx              the map sampled on a lattice
    baseline.lipx       fast-marching field, when baselines are enabled
"""

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baseline as bl
from .config import ConfigError, parse_config, serialize_config
from .construct import (ConstructConfig, ConstructionError, OscillatorParams, PreconditionError,
                        certify_oscillator, check_precondition, iterate)
from .expr import MapExpr
from .field import BumpStack
from .fieldio import export_field, sample_lattice
from .geometry import Segment, SegmentLedger
from .verify import (Certificate, attainment_fraction, check_coverage, check_exceptional_volume, check_segments,
                     check_separation, check_solution, check_stability)

log = logging.getLogger("lipforge")

EXIT_OK = 0
EXIT_CERTIFICATE = 1
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3
EXIT_CONSTRUCTION = 4

CERT_HEADER = ["name", "scale", "bound", "measured", "pass", "witness", "mode"]
REPORT_HEADER = ["scale", "radius", "spacing", "balls", "bumps", "segments", "eps", "max_deficit", "min_margin",
                 "max_h", "h_evals", "coverage", "coverage_bound", "exceptional_volume", "exceptional_bound",
                 "attainment"]
SLOW_SCALE = 10
OSCILLATOR_AUDIT_MAX = 200


def _num(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def certificate_rows(certs):
    rows = []
    for c in certs:
        for r in c.rows():
            wit = "" if r.witness is None else " ".join(_num(v) for v in np.ravel(r.witness))
            rows.append([r.name, r.scale, _num(r.bound), _num(r.measured), _num(bool(r.passed)), wit, r.mode])
    return rows


def failed(certs):
    return [r for c in certs for r in c.rows() if r.mode == "assert" and not r.passed]


# ---------------------------------------------------------------------------
# run state, in memory or reloaded from disk


@dataclass
class _EpsRow:
    scale: int
    eps: float


@dataclass
class RunState:
    """What verification needs: the stack, the ledger and per-scale bump counts."""

    u: BumpStack
    ledger: SegmentLedger
    snapshots: dict
    report: list
    balls: dict = field(default_factory=dict)  # scale -> BallResult list, only for fresh builds

    def snapshot(self, i):
        return self.u.prefix(self.snapshots[i])

    @classmethod
    def from_iteration(cls, res):
        return cls(res.u, res.ledger, dict(res.snapshots), list(res.report), res.balls)


def stack_to_json(state):
    u = state.u
    a = u.arrays
    doc = {
        "format": "lipforge-stack",
        "version": 1,
        "d": u.d,
        "D": u.D,
        "base": u.base.texts(),
        "snapshots": {str(k): int(v) for k, v in sorted(state.snapshots.items())},
        "eps": {str(r.scale): float(r.eps) for r in state.report},
        "bumps": {
            "center": a.centers.tolist(),
            "radius": a.radius.tolist(),
            "direction": a.direction.tolist(),
            "eps0": a.eps0.tolist(),
            "t": a.t.tolist(),
            "axis": a.axis.tolist(),
            "scale": a.scale.tolist(),
            "parent": a.parent.tolist(),
            "samples": a.samples.tolist(),
        },
    }
    return json.dumps(doc, indent=1) + "\n"


def ledger_rows(state):
    d = state.ledger.d
    rows = []
    for i in state.ledger.scales:
        centers = state.ledger.centers_at(i)
        results = state.balls.get(i)
        for k, s in enumerate(state.ledger.new_at(i)):
            c = centers[s.parent] if 0 <= s.parent < len(centers) else np.full(d, np.nan)
            lip = psi_max = ""
            if results is not None:
                lip, psi_max = _num(results[k].lip), _num(results[k].psi_max)
            rows.append([i, s.parent, *map(_num, c), *map(_num, s.a), *map(_num, s.b), lip, psi_max])
    return rows


def ledger_header(d):
    return (["scale", "parent"] + [f"center_{k}" for k in range(d)] + [f"a_{k}" for k in range(d)]
            + [f"b_{k}" for k in range(d)] + ["lip_at_build", "psi_max"])


def load_run(run_dir):
    """Rebuild config and run state from a run directory."""
    run_dir = Path(run_dir)
    cfg = parse_config((run_dir / "config.txt").read_text(encoding="utf-8"), check_psi=False)
    doc = json.loads((run_dir / "stack.json").read_text(encoding="utf-8"))
    d, D = int(doc["d"]), int(doc["D"])
    base = MapExpr.parse(doc["base"], d)
    if base.D != D:
        raise ValueError("stack.json: base dimension does not match D")
    b = doc["bumps"]
    u = BumpStack.from_arrays(base, b["center"], b["radius"], b["direction"], b["eps0"], b["t"], b["axis"],
                              b["scale"], b["parent"], b["samples"])
    snapshots = {int(k): int(v) for k, v in doc["snapshots"].items()}
    report = [_EpsRow(int(k), float(v)) for k, v in doc["eps"].items()]

    ledger = SegmentLedger(d)
    by_scale = {i: ([], []) for i in sorted(snapshots) if i > 0}
    with open(run_dir / "ledger.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            i, parent = int(row[0]), int(row[1])
            vals = [float(v) for v in row[2:2 + 3 * d]]
            c, a, bb = vals[:d], vals[d:2 * d], vals[2 * d:]
            centers, segs = by_scale.setdefault(i, ([], []))
            centers.append(c)
            segs.append(Segment(a, bb, i, parent))
    for i, (centers, segs) in sorted(by_scale.items()):
        ledger.add_scale(i, np.array(centers, float).reshape(-1, d), segs)
    return cfg, RunState(u, ledger, snapshots, report)


# ---------------------------------------------------------------------------
# verification suite


def oscillator_certificate(u, cap=OSCILLATOR_AUDIT_MAX, n=1000):
    """min over (a stride of) the bumps of measured diameter Lip / t; >= 1 by construction."""
    a = u.arrays
    idx = np.flatnonzero(a.t > 0)
    if len(idx) > cap:
        idx = idx[np.linspace(0, len(idx) - 1, cap).astype(int)]
    if not len(idx):
        return Certificate("oscillator", "all", True, float("inf"), 1.0, 0)
    ratios = np.array([certify_oscillator(u.bump(k), n, u.D) / a.t[k] for k in idx])
    k = int(np.argmin(ratios))
    ok = bool(ratios[k] >= 1.0)
    return Certificate("oscillator", "all", ok, float(ratios[k]), 1.0, len(idx),
                       None if ok else a.centers[idx[k]])


def verify_state(cfg, state, slow=False, n_free=100_000, n_volume=None):
    """All certificates for a finished run, plus per-scale report columns."""
    dom, f, psi = cfg.domain(), cfg.f_map(), cfg.psi_map()
    scales = [i for i in sorted(state.snapshots) if i > 0]
    i_max = scales[-1] if scales else 0
    certs = []
    try:
        excess = check_precondition(f, psi, dom)
        certs.append(Certificate("precondition", "0", True, excess, 0.0, 10_000))
    except PreconditionError as err:
        certs.append(Certificate("precondition", "0", False, err.excess, 0.0, 10_000, err.witness))

    X = dom.halton_free(n_free)
    sol = check_solution(state.u, psi, f, dom, cfg.tol_sub, state.ledger, i_max, seed=cfg.seed, X=X)
    certs.extend(sol.parts)
    certs.append(check_segments(state, psi))
    certs.append(check_separation(state.ledger, i_max))
    certs.append(check_stability(state))
    certs.append(oscillator_certificate(state.u))

    n_volume = n_volume or (1_000_000 if slow else 100_000)
    M = dom.boundary_content([0.04, 0.02, 0.01]).estimate
    per_scale = {}
    for i in scales:
        row = {"coverage": None, "coverage_bound": None, "exceptional_volume": None, "exceptional_bound": None}
        if i < SLOW_SCALE or slow:
            cov = check_coverage(state.ledger, dom, i, X=X)
            vol = check_exceptional_volume(state.ledger, dom, i, M=M, n=n_volume)
            certs += [cov, vol]
            row.update(coverage=cov.measured, coverage_bound=cov.bound, exceptional_volume=vol.measured,
                       exceptional_bound=vol.bound)
        row["attainment"] = attainment_fraction(state.snapshot(i), state.ledger.upto(i), psi, dom, i, X)
        per_scale[i] = row
    return certs, per_scale


def report_rows(state, per_scale, build_rows=None):
    build_rows = {r.scale: r for r in (build_rows or [])}
    rows = []
    for i in sorted(per_scale):
        b = build_rows.get(i)
        row = [i, _num(2.0**-i)]
        if b is not None:
            row += [_num(b.spacing), b.balls, b.bumps, b.segments, _num(b.eps), _num(b.max_deficit),
                    _num(b.min_margin), _num(b.max_h), b.h_evals]
        else:
            segs = len(state.ledger.new_at(i))
            bumps = state.snapshots[i] - state.snapshots.get(i - 1, 0)
            eps = next((r.eps for r in state.report if r.scale == i), 2.0**-i)
            row += ["", segs, bumps, segs, _num(eps), "", "", "", ""]
        p = per_scale[i]
        row += [_num(p[k]) for k in ("coverage", "coverage_bound", "exceptional_volume", "exceptional_bound",
                                     "attainment")]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# baselines


def run_baseline(cfg, u=None):
    """Fast marching and McShane fields for ``cfg``; certificates compare them with ``u``."""
    dom, f, psi = cfg.domain(), cfg.f_map(), cfg.psi_map()
    if f.D != 1:
        raise ValueError("grid baselines need scalar data (D = 1)")
    h = cfg.baseline_h
    fm = bl.fast_march(dom, psi, f, h)
    mc = bl.mcshane_extend(f, psi, dom, h)
    fm_cert = fm.certificate
    fm_cert.mode = "report"
    certs = [fm_cert, mc.certificate]
    mc.certificate.mode = "report"
    if u is not None:
        cmp = bl.compare(u, fm, f)
        exact = cmp["map_boundary_exact"]
        certs.append(Certificate("map_boundary_on_grid", "baseline", exact, cmp["map_boundary_violation"], 0.0,
                                 cmp["gamma_nodes"]))
        certs.append(Certificate("map_minus_fast_march", "baseline", True, cmp["sup_abs"], float("nan"),
                                 cmp["nodes"], mode="report"))
    return fm, mc, certs


# ---------------------------------------------------------------------------
# entry points


def parse_lattice(text, d):
    try:
        counts = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--export-lattice expects NxM, got {text!r}") from None
    if len(counts) == 1:
        counts = counts * d
    if len(counts) != d or min(counts) < 2:
        raise ConfigError(f"--export-lattice needs {d} counts >= 2, got {text!r}")
    return counts


def default_lattice(d):
    return (129,) * d if d == 2 else (17,) * d


class _Writer:
    def __init__(self, out):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.timings = []

    def text(self, name, text):
        (self.out / name).write_text(text, encoding="utf-8")

    def csv(self, name, header, rows):
        self.text(name, _csv_text(header, rows))

    def stage(self, name, t0):
        self.timings.append([name, f"{time.perf_counter() - t0:.3f}"])

    def finish(self, name="timings.csv"):
        self.csv(name, ["stage", "seconds"], self.timings)


def build(cfg, out=None, slow=False, lattice=None):
    """Construct, verify and export; returns an exit status."""
    w = _Writer(out or cfg.out_dir)
    w.text("config.txt", serialize_config(cfg))
    dom, f, psi = cfg.domain(), cfg.f_map(), cfg.psi_map()
    ccfg = ConstructConfig(tol_root=cfg.tol_root, tol_sub=cfg.tol_sub, samples=cfg.samples,
                           params=OscillatorParams(seed=cfg.seed))
    t0 = time.perf_counter()
    try:
        res = iterate(f, psi, dom, cfg.imax, ccfg,
                      progress=lambda r: log.info("scale %d: %d balls, %d bumps, %.2fs", r.scale, r.balls,
                                                  r.bumps, r.seconds))
    except PreconditionError as err:
        log.error("precondition failed: %s", err)
        cert = Certificate("precondition", "0", False, err.excess, 0.0, ccfg.precondition_samples, err.witness)
        w.csv("certificates.csv", CERT_HEADER, certificate_rows([cert]))
        w.csv("report.csv", REPORT_HEADER, [])
        w.stage("construct", t0)
        w.finish()
        return EXIT_PRECONDITION
    except ConstructionError as err:
        log.error("construction failed: %s", err)
        cert = Certificate("construction", "?", False, float("nan"), float("nan"), 0)
        w.csv("certificates.csv", CERT_HEADER, certificate_rows([cert]))
        w.csv("report.csv", REPORT_HEADER, [])
        w.stage("construct", t0)
        w.finish()
        return EXIT_CONSTRUCTION
    w.stage("construct", t0)

    state = RunState.from_iteration(res)
    w.text("stack.json", stack_to_json(state))
    w.csv("ledger.csv", ledger_header(dom.d), ledger_rows(state))

    t0 = time.perf_counter()
    certs, per_scale = verify_state(cfg, state, slow)
    w.stage("verify", t0)

    if cfg.baseline_enabled:
        t0 = time.perf_counter()
        fm, _, bcerts = run_baseline(cfg, state.u)
        certs += bcerts
        export_field(fm, w.out / "baseline.lipx")
        w.stage("baseline", t0)

    w.csv("certificates.csv", CERT_HEADER, certificate_rows(certs))
    w.csv("report.csv", REPORT_HEADER, report_rows(state, per_scale, res.report))

    t0 = time.perf_counter()
    counts = lattice or default_lattice(dom.d)
    export_field(sample_lattice(state.u, dom.lo, dom.hi, counts), w.out / "u.lipx")
    w.stage("export", t0)
    w.finish()
    bad = failed(certs)
    for c in bad:
        log.error("certificate %s [%s] failed: measured %r, bound %r", c.name, c.scale, c.measured, c.bound)
    return EXIT_CERTIFICATE if bad else EXIT_OK


def verify(run_dir, slow=False):
    """Recompute every certificate from the files of a run directory."""
    run_dir = Path(run_dir)
    cfg, state = load_run(run_dir)
    certs, per_scale = verify_state(cfg, state, slow)
    text = _csv_text(CERT_HEADER, certificate_rows(certs))
    old = run_dir / "certificates.csv"
    if old.exists() and not cfg.baseline_enabled and old.read_text(encoding="utf-8") != text:
        log.warning("recomputed certificates differ from %s", old)
    (run_dir / "verify.csv").write_text(text, encoding="utf-8")
    bad = failed(certs)
    for c in bad:
        log.error("certificate %s [%s] failed: measured %r, bound %r", c.name, c.scale, c.measured, c.bound)
    return EXIT_CERTIFICATE if bad else EXIT_OK


def baseline(cfg, out=None):
    """Grid baselines on their own; compares with the map if ``out`` holds a run."""
    w = _Writer(out or cfg.out_dir)
    u = None
    if (w.out / "stack.json").exists():
        u = load_run(w.out)[1].u
    t0 = time.perf_counter()
    fm, mc, certs = run_baseline(cfg, u)
    export_field(fm, w.out / "baseline.lipx")
    export_field(mc, w.out / "mcshane.lipx")
    w.csv("baseline.csv", CERT_HEADER, certificate_rows(certs))
    w.stage("baseline", t0)
    w.finish("baseline_timings.csv")
    return EXIT_CERTIFICATE if failed(certs) else EXIT_OK


def report(run_dir, stream):
    """Human-readable summary of a run directory's CSVs."""
    run_dir = Path(run_dir)
    with open(run_dir / "certificates.csv", newline="", encoding="utf-8") as fh:
        certs = list(csv.DictReader(fh))
    scales = []
    if (run_dir / "report.csv").exists():
        with open(run_dir / "report.csv", newline="", encoding="utf-8") as fh:
            scales = list(csv.DictReader(fh))
    print(f"run: {run_dir}", file=stream)
    if scales:
        print(f"{'scale':>5} {'balls':>7} {'bumps':>7} {'coverage':>10} {'vol(Z)':>10} {'attain':>8}", file=stream)
        for r in scales:
            print(f"{r['scale']:>5} {r['balls']:>7} {r['bumps']:>7} {_short(r['coverage']):>10} "
                  f"{_short(r['exceptional_volume']):>10} {_short(r['attainment']):>8}", file=stream)
    bad = 0
    for c in certs:
        status = "PASS" if c["pass"] == "true" else ("FAIL" if c["mode"] == "assert" else "note")
        bad += status == "FAIL"
        wit = f"  at ({c['witness'].replace(' ', ', ')})" if c["witness"] and status != "PASS" else ""
        print(f"{status}  {c['name']:<22} scale {c['scale']:<6} measured {_short(c['measured']):>12}  "
              f"bound {_short(c['bound']):>12}{wit}", file=stream)
    return EXIT_CERTIFICATE if bad else EXIT_OK


def _short(text):
    if text in ("", None):
        return "-"
    try:
        return f"{float(text):.6g}"
    except ValueError:
        return text


def load_config(path, imax=None, seed=None):
    text = Path(path).read_bytes()
    cfg = parse_config(text)
    return cfg.with_overrides(imax=imax, seed=seed)
