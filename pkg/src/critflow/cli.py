"""Command-line entry points: run, constants, verify, sweep, report.

Exit codes: 0 ok, 2 configuration error, 3 solver abort, 4 verification failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import glob
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import (Classification, FitError, classify_dichotomy, decompose, fit_bubble,
                       rate_report)
from .bubble import RESOLUTION_LIMIT, dimension_constants
from .checkpoint import write_checkpoint
from .elliptic import ParameterError, SolverError, green_regular_part
from .flow import (FLOW_COLUMNS, DtPolicy, FlowAbort, initial_state, preset_initial,
                   run_yamabe)
from .geometry import ConfigurationError, Domain, Field, ResolutionError, build_grid

log = logging.getLogger("critflow")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


class ConfigError(ValueError):
    """Configuration problem with a location (line and field) attached."""


# --- configuration -----------------------------------------------------------------

SCHEMA = {
    "domain": {"kind": str, "n": int, "radius": float, "r_in": float, "r_out": float,
               "half_widths": str},
    "grid": {"mode": str, "n_nodes": int, "grading": float, "h": float},
    "initial": {"preset": str, "a": str, "lambda": float, "noise": float, "seed": int},
    "flow": {"dt0": float, "dt_min": float, "dt_max": float, "r_target": float,
             "u_target": float, "max_steps": int, "s_end": float, "lam_ceiling": float,
             "checkpoint_every": int, "snapshot_every": int},
    "fit": {"min_lambda": float, "growth": float, "delta0": float},
    "tolerances": {"elliptic": float, "newton": float, "fit": float},
    "output": {"dir": str},
}


@dataclass(frozen=True)
class RunConfig:
    name: str
    kind: str
    n: int
    domain_params: tuple
    grid_mode: str = "radial"
    n_nodes: int = 512
    grading: Optional[float] = None
    h: float = 1.0 / 16
    preset: str = "dome"
    a: Optional[tuple] = None
    lam: float = 4.0
    noise: float = 0.0
    seed: int = 0
    dt0: float = 1e-3
    dt_min: float = 1e-5
    dt_max: float = 1e-1
    r_target: float = 1e-3
    u_target: float = 2e-2
    max_steps: int = 20000
    s_end: float = math.inf
    lam_ceiling: float = math.inf
    checkpoint_every: int = 200
    snapshot_every: int = 10
    fit_min_lambda: float = 3.0
    fit_growth: float = 0.02
    delta0: Optional[float] = None
    tol_elliptic: Optional[float] = None
    tol_newton: float = 1e-11
    tol_fit: float = 1e-10
    output_dir: str = "runs/default"

    def domain(self) -> Domain:
        return Domain(self.kind, self.n, tuple(self.domain_params))

    def policy(self) -> DtPolicy:
        return DtPolicy(self.dt_min, self.dt_max, self.r_target, self.u_target)

    def digest(self) -> str:
        d = asdict(self)
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return i
        elif current == section and key is not None and "=" in s:
            if s.split("=", 1)[0].strip() == key:
                return i
    return 0


def parse_config(text: str, source: str = "<config>", name: Optional[str] = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    def where(sec, key=None):
        return f"{source}:{_line_of(text, sec, key)} [{sec}]" + (f" {key}" if key else "")

    vals: dict = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{where(sec)}: unknown section")
        for key, raw in cp.items(sec):
            typ = SCHEMA[sec].get(key)
            if typ is None:
                raise ConfigError(f"{where(sec, key)}: unknown field")
            try:
                vals[(sec, key)] = typ(raw)
            except ValueError as exc:
                raise ConfigError(f"{where(sec, key)}: cannot read {raw!r} as {typ.__name__}") from exc

    def get(sec, key, default=None):
        return vals.get((sec, key), default)

    def floats(sec, key):
        raw = get(sec, key)
        if raw is None:
            return None
        try:
            return tuple(float(x) for x in raw.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"{where(sec, key)}: expected a list of numbers") from exc

    kind = get("domain", "kind")
    if kind is None:
        raise ConfigError(f"{source}: [domain] kind is required")
    n = get("domain", "n", 3)
    if kind == "ball":
        params = (get("domain", "radius", 1.0),)
    elif kind == "annulus":
        params = (get("domain", "r_in", 0.5), get("domain", "r_out", 1.0))
    elif kind == "box":
        params = floats("domain", "half_widths") or (1.0,) * n
    else:
        raise ConfigError(f"{where('domain', 'kind')}: unknown domain kind {kind!r}")

    kw = dict(name=name or Path(source).stem, kind=kind, n=n, domain_params=params)
    mapping = {("grid", "mode"): "grid_mode", ("grid", "n_nodes"): "n_nodes",
               ("grid", "grading"): "grading", ("grid", "h"): "h",
               ("initial", "preset"): "preset", ("initial", "lambda"): "lam",
               ("initial", "noise"): "noise", ("initial", "seed"): "seed",
               ("fit", "min_lambda"): "fit_min_lambda", ("fit", "growth"): "fit_growth",
               ("fit", "delta0"): "delta0", ("tolerances", "elliptic"): "tol_elliptic",
               ("tolerances", "newton"): "tol_newton", ("tolerances", "fit"): "tol_fit",
               ("output", "dir"): "output_dir"}
    for key in SCHEMA["flow"]:
        mapping[("flow", key)] = key
    for k, attr in mapping.items():
        if k in vals:
            kw[attr] = vals[k]
    if ("initial", "a") in vals:
        kw["a"] = floats("initial", "a")
    cfg = RunConfig(**kw)
    validate_config(cfg, where)
    return cfg


def validate_config(cfg: RunConfig, where=lambda s, k=None: f"[{s}] {k or ''}") -> None:
    try:
        dom = cfg.domain()
    except ConfigurationError as exc:
        raise ConfigError(f"{where('domain')}: {exc}") from exc
    if cfg.grid_mode not in ("radial", "cartesian"):
        raise ConfigError(f"{where('grid', 'mode')}: must be radial or cartesian")
    if cfg.grid_mode == "radial" and not dom.radially_symmetric:
        raise ConfigError(f"{where('grid', 'mode')}: radial grids need a ball or annulus")
    if cfg.preset not in ("dome", "bubble", "perturbed-bubble"):
        raise ConfigError(f"{where('initial', 'preset')}: unknown preset {cfg.preset!r}")
    if cfg.a is not None and len(cfg.a) != cfg.n:
        raise ConfigError(f"{where('initial', 'a')}: need {cfg.n} coordinates")
    for attr, sec, key in (("tol_newton", "tolerances", "newton"), ("tol_fit", "tolerances", "fit"),
                           ("dt0", "flow", "dt0"), ("fit_growth", "fit", "growth")):
        if not getattr(cfg, attr) > 0:
            raise ConfigError(f"{where(sec, key)}: must be positive")
    if cfg.tol_elliptic is not None and not cfg.tol_elliptic > 0:
        raise ConfigError(f"{where('tolerances', 'elliptic')}: must be positive")
    if not 0 < cfg.dt_min <= cfg.dt_max:
        raise ConfigError(f"{where('flow', 'dt_min')}: need 0 < dt_min <= dt_max")
    if math.isfinite(cfg.lam_ceiling):
        spacing = _center_spacing(cfg)
        if cfg.lam_ceiling * spacing > RESOLUTION_LIMIT:
            raise ConfigError(f"{where('flow', 'lam_ceiling')}: lambda {cfg.lam_ceiling:g} is not "
                              f"resolved (lambda*h = {cfg.lam_ceiling * spacing:.3g})")


def _center_spacing(cfg: RunConfig) -> float:
    if cfg.grid_mode == "cartesian":
        return cfg.h
    if cfg.kind == "ball":
        gamma = 2.0 if cfg.grading is None else cfg.grading
        R = cfg.domain_params[0]
        # spacing at the bubble scale 1/lam, estimated from the grading law
        x = (1.0 / (cfg.lam_ceiling * R)) ** (1.0 / gamma) if math.isfinite(cfg.lam_ceiling) else 0
        return R * gamma * max(x, 1.0 / (cfg.n_nodes - 1)) ** (gamma - 1) / (cfg.n_nodes - 1)
    return (cfg.domain_params[1] - cfg.domain_params[0]) / (cfg.n_nodes - 1)


PRESETS = {
    "ball-blowup-n3-radial": """
[domain]
kind = ball
n = 3
radius = 1.0

[grid]
mode = radial
n_nodes = 1024

[initial]
preset = dome

[flow]
dt0 = 1e-3
r_target = 5e-4
max_steps = 20000
lam_ceiling = 200
checkpoint_every = 200

[fit]
min_lambda = 3
growth = 0.02

[output]
dir = runs/ball-blowup-n3-radial
""",
    "annulus-steady-n3-radial": """
[domain]
kind = annulus
n = 3
r_in = 0.5
r_out = 1.0

[grid]
mode = radial
n_nodes = 512

[initial]
preset = dome

[flow]
dt0 = 1e-3
max_steps = 20000
s_end = 20

[output]
dir = runs/annulus-steady-n3-radial
""",
}


def load_config(spec: str) -> RunConfig:
    """A preset name or a path to a config file."""
    if spec in PRESETS:
        return parse_config(PRESETS[spec], source=f"preset:{spec}", name=spec)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"{spec}: no such preset or config file")
    return parse_config(path.read_text(), source=str(path))


# --- run orchestration --------------------------------------------------------------

def fit_columns(n: int) -> list[str]:
    return (["s"] + [f"a{j}" for j in range(n)] + ["lambda", "alpha"]
            + [f"b{j}" for j in range(n + 2)]
            + ["M2", "w_h1", "eta_l2t", "ortho_defect", "pohozaev_lhs", "pohozaev_pred",
               "rel_error", "central_defect", "r"])


UNITS = {"step": "count", "s": "u-clock", "t": "v-clock", "dt": "u-clock", "r": "energy",
         "Y": "energy", "F": "energy", "M2": "curvature^2", "vol_drift": "relative",
         "min_u": "field", "max_u": "field", "vol": "relative", "Lq": "field",
         "lambda": "1/length", "alpha": "ratio", "M2_": "curvature^2"}


@dataclass
class RunResult:
    config: RunConfig
    rows: list
    fits: list
    classification: Classification
    rates: Optional[dict]
    final_state: object
    out_dir: Optional[Path]
    runtime: float
    snapshots: list = field(default_factory=list)


class _Fitter:
    """Fits along the run, every time the peak-based lambda moves by `growth`."""

    def __init__(self, cfg: RunConfig, grid):
        self.cfg = cfg
        self.grid = grid
        self.c = dimension_constants(cfg.n)
        self.enabled = True
        self.guess = None
        self.last_lam = 0.0
        self.fits: list = []
        self.H_cache: dict = {}

    def peak_lambda(self, u: Field) -> float:
        n = self.cfg.n
        cn = (n * (n - 2)) ** ((n - 2) / 4.0)
        return (np.max(u.values) * self.c.K_n ** ((n - 2) / 4.0) / cn) ** (2.0 / (n - 2))

    def H(self, a) -> float:
        key = tuple(np.round(a, 12))
        if key not in self.H_cache:
            self.H_cache[key] = green_regular_part(self.grid, np.asarray(a), self.cfg.delta0)[1]
        return self.H_cache[key]

    def __call__(self, state, row) -> None:
        if not self.enabled:
            return
        lam0 = self.peak_lambda(state.u)
        if lam0 < self.cfg.fit_min_lambda or lam0 < self.last_lam * (1 + self.cfg.fit_growth):
            return
        try:
            rep = fit_bubble(state.u, self.c.K_n, self.guess, self.cfg.delta0, tol=self.cfg.tol_fit)
        except (ParameterError, ConfigurationError) as exc:
            log.info("bubble fits disabled: %s", exc)
            self.enabled = False
            return
        self.guess = rep.params
        self.last_lam = lam0
        dec = decompose(state.u, rep.params, row["r"], self.c.K_n, self.cfg.delta0)
        n = self.cfg.n
        pred = self.c.C2 * self.H(rep.params.a) * rep.params.lam ** (2 - n)
        rec = {"s": state.s_time}
        rec.update({f"a{j}": float(rep.params.a[j]) for j in range(n)})
        rec.update({"lambda": rep.params.lam, "alpha": rep.params.alpha})
        rec.update({f"b{j}": float(dec.b[j]) for j in range(n + 2)})
        rec.update({"M2": dec.M2, "w_h1": dec.w_h1, "eta_l2t": dec.eta_l2t,
                    "ortho_defect": dec.ortho_defect, "pohozaev_lhs": dec.pohozaev_lhs,
                    "pohozaev_pred": pred, "rel_error": dec.rel_error,
                    "central_defect": dec.central_defect, "r": row["r"]})
        self.fits.append(rec)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path: Path, columns, records, digest: str, title: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {title}; config_sha256={digest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        fh.write("# units: " + ",".join(UNITS.get(c, "-") for c in columns) + "\n")
        for rec in records:
            w.writerow([_fmt(rec[c]) for c in columns])


def read_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rdr = csv.DictReader(lines)
    return [{k: float(v) for k, v in row.items()} for row in rdr]


def execute_run(cfg: RunConfig, out_dir: Optional[Path] = None, progress=None) -> RunResult:
    """Run the flow described by cfg; write artifacts when out_dir is given."""
    t0 = time.perf_counter()
    grid = build_grid(cfg.domain(), cfg.grid_mode, n_nodes=cfg.n_nodes, grading=cfg.grading,
                      h=cfg.h)
    if cfg.tol_elliptic is not None:
        grid._cache["elliptic_tol"] = cfg.tol_elliptic
    u0 = preset_initial(grid, cfg.preset, a=cfg.a, lam=cfg.lam, noise=cfg.noise, seed=cfg.seed)
    state = initial_state(u0, dt=cfg.dt0)
    fitter = _Fitter(cfg, grid)
    snapshots = []
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.bin" if out_dir is not None else None

    def on_step(st, row):
        if st.step_index % cfg.snapshot_every == 0:
            snapshots.append((st.s_time, st.u))
        fitter(st, row)
        if ckpt is not None and st.step_index % cfg.checkpoint_every == 0:
            write_checkpoint(ckpt, st)
        if progress:
            progress(st, row)

    def stop(st, row):
        return bool(fitter.fits) and fitter.fits[-1]["lambda"] >= cfg.lam_ceiling

    last = {"state": state}

    def tracking(st, row):
        last["state"] = st
        on_step(st, row)

    try:
        state, rows = run_yamabe(state, max_steps=cfg.max_steps, s_end=cfg.s_end, stop=stop,
                                 on_step=tracking, policy=cfg.policy(), newton_tol=cfg.tol_newton)
    except (FlowAbort, SolverError, FitError, ResolutionError) as exc:
        if out_dir is not None:
            write_checkpoint(ckpt, last["state"])
            (out_dir / "failure.json").write_text(json.dumps(
                {"error": type(exc).__name__, "message": str(exc),
                 "step": last["state"].step_index, "s": last["state"].s_time}, indent=2))
        raise
    if not snapshots or snapshots[-1][1] is not state.u:
        snapshots.append((state.s_time, state.u))
    s_end = state.s_time
    mid = min(snapshots, key=lambda p: abs(p[0] - 0.5 * s_end))[1]
    cls = classify_dichotomy(rows, u_mid=mid, u_last=state.u, fits=fitter.fits)
    rates = None
    if len(fitter.fits) >= 30:
        F = fitter.fits
        n = cfg.n
        a = np.array([[f[f"a{j}"] for j in range(n)] for f in F])
        rr = rate_report([f["s"] for f in F], [f["lambda"] for f in F], a,
                         [f["M2"] for f in F], n, fitter.H(a[-1]), b0=[f["b0"] for f in F])
        rates = rr.as_dict()
    runtime = time.perf_counter() - t0
    if out_dir is not None:
        digest = cfg.digest()
        write_csv(out_dir / "flow.csv", FLOW_COLUMNS, rows, digest, "flow log")
        write_csv(out_dir / "fits.csv", fit_columns(cfg.n), fitter.fits, digest, "bubble fits")
        (out_dir / "classification.json").write_text(json.dumps(cls.as_dict(), indent=2,
                                                                sort_keys=True, default=float))
        (out_dir / "rates.json").write_text(json.dumps(rates, indent=2, sort_keys=True,
                                                       default=float))
        (out_dir / "config.json").write_text(json.dumps(
            {**asdict(cfg), "digest": digest}, indent=2, sort_keys=True, default=str))
        write_checkpoint(ckpt, state)
    return RunResult(cfg, rows, fitter.fits, cls, rates, state, out_dir, runtime, snapshots)


# --- report ---------------------------------------------------------------------------

def write_report(run_dir: Path) -> list[Path]:
    """Plot-ready TSV files from a run directory."""
    flow = read_csv(run_dir / "flow.csv")
    fits = read_csv(run_dir / "fits.csv") if (run_dir / "fits.csv").exists() else []
    out = []

    def tsv(name, header, rows):
        p = run_dir / name
        with open(p, "w") as fh:
            fh.write("\t".join(header) + "\n")
            for r in rows:
                fh.write("\t".join(repr(float(x)) for x in r) + "\n")
        out.append(p)

    tsv("r_of_s.tsv", ["s", "r"], [(f["s"], f["r"]) for f in flow])
    tsv("lambda_of_s.tsv", ["s", "lambda"], [(f["s"], f["lambda"]) for f in fits])
    tsv("M2_of_lambda.tsv", ["lambda", "M2"], [(f["lambda"], f["M2"]) for f in fits])
    tsv("relerr_of_s.tsv", ["s", "rel_error"], [(f["s"], f["rel_error"]) for f in fits])
    return out


# --- command line ---------------------------------------------------------------------

def _sweep_one(path: str) -> tuple[str, int]:
    try:
        cfg = load_config(path)
        execute_run(cfg, Path(cfg.output_dir))
        return path, EXIT_OK
    except ConfigError:
        return path, EXIT_CONFIG
    except (FlowAbort, SolverError, FitError, ResolutionError):
        return path, EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="critflow", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("run", help="run a config file or a named preset")
    p.add_argument("config")
    p.add_argument("--out", help="override the output directory")
    p = sub.add_parser("constants", help="print the dimension constants as JSON")
    p.add_argument("n", type=int)
    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite")
    p = sub.add_parser("sweep", help="run every config matching a glob")
    p.add_argument("pattern")
    p.add_argument("--workers", type=int, default=int(os.environ.get("CRITFLOW_WORKERS", "1")))
    p = sub.add_parser("report", help="write plot-ready TSV files for a run directory")
    p.add_argument("run_dir")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "constants":
        try:
            c = dimension_constants(args.n)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(c.as_dict(), indent=2))
        return EXIT_OK
    if args.cmd == "run":
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        out = Path(args.out or cfg.output_dir)
        try:
            res = execute_run(cfg, out)
        except (FlowAbort, SolverError, FitError, ResolutionError) as exc:
            print(f"solver abort: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(json.dumps({"classification": res.classification.kind, "steps": len(res.rows) - 1,
                          "s_end": res.final_state.s_time, "out_dir": str(out)}))
        return EXIT_OK
    if args.cmd == "verify":
        from .verification import SUITES, run_suite
        if args.suite not in SUITES:
            print(f"config error: unknown suite {args.suite!r}; choose from {sorted(SUITES)}",
                  file=sys.stderr)
            return EXIT_CONFIG
        checks = run_suite(args.suite)
        print(json.dumps([c.as_dict() for c in checks], indent=2, default=float))
        return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY
    if args.cmd == "sweep":
        paths = sorted(glob.glob(args.pattern))
        if not paths:
            print(f"config error: no configs match {args.pattern!r}", file=sys.stderr)
            return EXIT_CONFIG
        with ProcessPoolExecutor(max_workers=max(args.workers, 1)) as ex:
            results = list(ex.map(_sweep_one, paths))
        for path, code in results:
            print(f"{path}\t{code}")
        return max(code for _, code in results)
    if args.cmd == "report":
        run_dir = Path(args.run_dir)
        if not (run_dir / "flow.csv").exists():
            print(f"config error: {run_dir} has no flow.csv", file=sys.stderr)
            return EXIT_CONFIG
        for p in write_report(run_dir):
            print(p)
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
