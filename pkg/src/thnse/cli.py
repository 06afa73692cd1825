"""Command-line experiment runner: ``thnse run | converge | lei | probe``.

Configuration files are flat ``key = value`` text; values are Python
literals (numbers, strings, lists, tuples, booleans), bare words are read as
strings and ``#`` starts a comment. Every file must carry ``schema = 1``.

Exit codes: 0 success, 1 configuration or input error, 2 solver failure.
"""
from __future__ import annotations

import argparse
import ast
import csv
import logging
import os
import re
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .errors import ConfigurationError, SolverError
from .flows import RandomDivergenceFree, TaylorGreen
from .operators import required_degree
from .spaces import (Field, coercivity_probe, commutator_defect, constant_weight,
                     cosine_product_weight, cosine_weight, interpolate, inverse_constant_probe)
from .stepper import CONVECTION_MODES, SchemeConfig, SnapshotSequence, build_forms, run_scheme

log = logging.getLogger("thnse")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2
SCHEMA_VERSION = 1

# --------------------------------------------------------------------------- config

DEFAULTS = {
    "dim": 2,
    "n": 8,
    "theta": 1.0,
    "dt": 0.01,
    "T": 0.1,
    "picard_tol": 1e-12,
    "picard_max_iters": 50,
    "quad_degree": None,
    "convection": "theta",
    "initial": "taylor_green",
    "seed": 0,
    "out": "out",
    "ladder": None,
    "phi": ("g0", "g1", "g2"),
    "probe_levels": (2, 4, 8),
    "probe_weight": "g1",
    "probe_samples": 64,
}


def parse_config_text(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.isidentifier():
            raise ConfigurationError(f"line {lineno}: invalid key {key!r}")
        if key in cfg:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        try:
            cfg[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            cfg[key] = value
    if "schema" not in cfg:
        raise ConfigurationError("missing 'schema' key (expected schema = 1)")
    if cfg["schema"] != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported schema version {cfg['schema']!r}")
    unknown = set(cfg) - set(DEFAULTS) - {"schema"}
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return cfg


@dataclass
class ExperimentConfig:
    dim: int
    n: int
    theta: float
    dt: float
    T: float
    picard_tol: float
    picard_max_iters: int
    quad_degree: int | None
    convection: str
    initial: str
    seed: int
    out: Path
    ladder: list | None
    phi: tuple
    probe_levels: tuple
    probe_weight: str
    probe_samples: int
    force_theta_half: bool = False

    @classmethod
    def from_mapping(cls, cfg: dict, force_theta_half: bool = False) -> "ExperimentConfig":
        merged = {**DEFAULTS, **{k: v for k, v in cfg.items() if k != "schema"}}
        merged["out"] = Path(merged["out"])
        if merged["ladder"] is not None:
            merged["ladder"] = [(int(n), float(dt)) for n, dt in merged["ladder"]]
        if isinstance(merged["phi"], str):
            merged["phi"] = tuple(s.strip() for s in merged["phi"].split(","))
        exp = cls(**merged, force_theta_half=force_theta_half)
        exp.validate()
        return exp

    def validate(self):
        if self.dim not in (2, 3):
            raise ConfigurationError(f"dim must be 2 or 3, got {self.dim}")
        if not isinstance(self.n, int) or self.n < 1:
            raise ConfigurationError(f"n must be a positive integer, got {self.n}")
        if self.convection not in CONVECTION_MODES:
            raise ConfigurationError(f"convection must be one of {CONVECTION_MODES}")
        if self.quad_degree is not None and self.quad_degree < required_degree(self.dim):
            raise ConfigurationError(
                f"quad_degree {self.quad_degree} < {required_degree(self.dim)} breaks b_h(u, v, v) = 0")
        self.scheme(self.dt)  # scheme invariants (theta range, T = N dt)
        if self.ladder is not None:
            if not self.ladder:
                raise ConfigurationError("ladder must not be empty")
            for (n0, dt0), (n1, dt1) in zip(self.ladder, self.ladder[1:]):
                if n1 < n0 or dt1 > dt0 or (n1 == n0 and dt1 == dt0):
                    raise ConfigurationError(
                        f"ladder must be strictly refining: ({n0}, {dt0}) -> ({n1}, {dt1})")
            for _, dt in self.ladder:
                self.scheme(dt)
        bad = [p for p in self.phi if p not in diag.STANDARD_PHI_IDS]
        if bad:
            raise ConfigurationError(f"unknown test functions {bad}; use {diag.STANDARD_PHI_IDS}")
        if self.probe_weight not in diag.STANDARD_PHI_IDS:
            raise ConfigurationError(f"probe_weight must be one of {diag.STANDARD_PHI_IDS}")
        initial_selector(self)  # fail early on unknown initial data

    def scheme(self, dt: float) -> SchemeConfig:
        return SchemeConfig.from_step(
            self.theta, dt, self.T, picard_tol=self.picard_tol,
            picard_max_iters=self.picard_max_iters, quad_degree=self.quad_degree,
            convection=self.convection, force_theta_half=self.force_theta_half)


def load_config(path, force_theta_half=False, seed=None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config_text(text)
    if seed is not None:
        cfg["seed"] = seed
    return ExperimentConfig.from_mapping(cfg, force_theta_half=force_theta_half)


_SELECTOR = re.compile(r"^(\w+)(?:\((.*)\))?$")


def initial_selector(exp: ExperimentConfig):
    """Resolve the initial-data selector to a callable of points or a Field-like array.

    ``taylor_green``, ``zero``, ``random_divfree`` / ``random_divfree(seed)``,
    ``file(path)`` (final velocity of a snapshot file on the same mesh).
    """
    m = _SELECTOR.match(str(exp.initial).strip())
    if not m:
        raise ConfigurationError(f"cannot parse initial selector {exp.initial!r}")
    name, arg = m.group(1), m.group(2)
    if name == "taylor_green":
        return TaylorGreen(exp.dim)
    if name == "zero":
        return lambda x: np.zeros(x.shape)
    if name == "random_divfree":
        try:
            seed = exp.seed if not arg else int(arg)
        except ValueError:
            raise ConfigurationError(f"random_divfree seed must be an integer, got {arg!r}") from None
        return RandomDivergenceFree(exp.dim, seed)
    if name == "file":
        if not arg:
            raise ConfigurationError("file(...) initial selector needs a path")
        return ("file", arg.strip().strip("'\""))
    raise ConfigurationError(f"unknown initial selector {name!r}")


def _initial_field(exp: ExperimentConfig, forms):
    sel = initial_selector(exp)
    if isinstance(sel, tuple):
        snap = read_snapshot(sel[1])
        if (snap.dim, snap.n) != (forms.dim, forms.mesh.n):
            raise ConfigurationError(
                f"snapshot mesh (dim={snap.dim}, n={snap.n}) does not match the run "
                f"(dim={forms.dim}, n={forms.mesh.n})")
        return Field(forms.vspace, snap.velocities[-1].copy())
    return sel


# --------------------------------------------------------------------------- snapshots

MAGIC = b"THNSE1"
_HEADER = struct.Struct("<6s2s7Q2d")  # magic, tag, dim, n, N, nu, np, quad_degree, reserved, theta, dt


@dataclass
class SnapshotFile:
    dim: int
    n: int
    quad_degree: int
    theta: float
    dt: float
    velocities: np.ndarray  # (N + 1, nu)
    pressures: np.ndarray  # (N, np)

    @property
    def N(self) -> int:
        return self.velocities.shape[0] - 1

    def nbytes(self) -> int:
        return _HEADER.size + 8 * (self.velocities.size + self.pressures.size)

    @classmethod
    def from_sequence(cls, seq: SnapshotSequence) -> "SnapshotFile":
        return cls(dim=seq.forms.dim, n=seq.forms.mesh.n, quad_degree=seq.forms.vspace.quad.degree,
                   theta=seq.theta, dt=seq.dt, velocities=seq.velocities.copy(),
                   pressures=seq.pressures.copy())

    def to_sequence(self) -> SnapshotSequence:
        config = SchemeConfig(theta=self.theta, T=self.dt * self.N, N=self.N,
                              quad_degree=self.quad_degree, force_theta_half=(self.theta == 0.5))
        forms = build_forms(self.dim, self.n, self.quad_degree)
        if forms.vspace.ndof != self.velocities.shape[1] or forms.pspace.ndof != self.pressures.shape[1]:
            raise ConfigurationError("snapshot dof counts do not match the rebuilt spaces")
        return SnapshotSequence(config=config, forms=forms, velocities=self.velocities,
                                pressures=self.pressures,
                                iterations=np.zeros(self.N, dtype=np.int64),
                                residuals=np.zeros(self.N))


def write_snapshot(path, snap) -> Path:
    """Header, then u^0, then (u^m, p^m) for m = 1..N as little-endian float64."""
    if isinstance(snap, SnapshotSequence):
        snap = SnapshotFile.from_sequence(snap)
    nu, npr = snap.velocities.shape[1], snap.pressures.shape[1] if snap.N else 0
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, b"LE", snap.dim, snap.n, snap.N, nu, npr,
                              snap.quad_degree, 0, snap.theta, snap.dt))
        le = np.dtype("<f8")
        fh.write(snap.velocities[0].astype(le).tobytes())
        for m in range(1, snap.N + 1):
            fh.write(snap.velocities[m].astype(le).tobytes())
            fh.write(snap.pressures[m - 1].astype(le).tobytes())
    return path


def read_snapshot(path) -> SnapshotFile:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigurationError(f"cannot read snapshot {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise ConfigurationError(f"{path}: truncated snapshot header")
    magic, tag, dim, n, N, nu, npr, qdeg, _, theta, dt = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: not a THNSE1 snapshot file")
    if tag != b"LE":
        raise ConfigurationError(f"{path}: unsupported endianness tag {tag!r}")
    expected = _HEADER.size + 8 * (nu + N * (nu + npr))
    if len(data) != expected:
        raise ConfigurationError(f"{path}: size {len(data)} differs from declared {expected}")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    u0, rest = body[:nu], body[nu:].reshape(N, nu + npr)
    velocities = np.vstack([u0[None, :], rest[:, :nu]])
    return SnapshotFile(dim=dim, n=n, quad_degree=qdeg, theta=theta, dt=dt,
                        velocities=velocities, pressures=rest[:, nu:].copy())


# --------------------------------------------------------------------------- CSV

LEDGER_COLUMNS = ("m", "t_m", "kinetic", "increment_term", "dissipation_term",
                  "identity_residual", "picard_iters", "picard_residual")
CONVERGENCE_COLUMNS = ("level", "n", "h", "dt", "N", "l2l2_error", "l2h1_error", "order_l2l2",
                       "order_l2h1", "gap_lhs", "gap_rhs", "gap_factor", "dual_norm_dtv",
                       "pressure_ratio_max")
LEI_COLUMNS = ("phi_id", "D", "dissipation", "transport", "R_visc", "R_nl", "R_p1", "R_p2",
               "I2", "I12")
PROBE_COLUMNS = ("n", "h", "coercivity", "inverse_constant", "commutator_00", "commutator_01",
                 "commutator_11")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else format(float(v), ".17g")
    return str(v)


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])
    return path


def ledger_rows(seq: SnapshotSequence):
    led = diag.energy_ledger(seq)
    rows = [{"m": 0, "t_m": 0.0, "kinetic": led.kinetic[0]}]
    for m in range(1, seq.N + 1):
        rows.append({
            "m": m, "t_m": m * seq.dt, "kinetic": led.kinetic[m],
            "increment_term": led.increment_term[m - 1],
            "dissipation_term": led.dissipation[m - 1],
            "identity_residual": led.identity_residual[m - 1],
            "picard_iters": int(seq.iterations[m - 1]),
            "picard_residual": seq.residuals[m - 1],
        })
    return rows


def fitted_slope(x, y) -> float:
    """Least-squares slope of log y against log x; NaN when any y vanishes."""
    x, y = np.asarray(x, float), np.abs(np.asarray(y, float))
    if len(x) < 2 or np.any(y <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# --------------------------------------------------------------------------- commands

def _run_one(exp: ExperimentConfig, n: int, dt: float) -> SnapshotSequence:
    forms = build_forms(exp.dim, n, exp.quad_degree)
    scheme = exp.scheme(dt)
    return run_scheme(forms, _initial_field(exp, forms), scheme)


def cmd_run(exp: ExperimentConfig) -> int:
    seq = _run_one(exp, exp.n, exp.dt)
    exp.out.mkdir(parents=True, exist_ok=True)
    write_snapshot(exp.out / "snapshots.thnse", seq)
    write_csv(exp.out / "energy_ledger.csv", LEDGER_COLUMNS, ledger_rows(seq))
    led = diag.energy_ledger(seq)
    print(f"run: {seq.N} steps, kinetic {led.kinetic[0]:.6g} -> {led.kinetic[-1]:.6g}, "
          f"max identity residual {led.max_residual:.3e}")
    return EXIT_OK


def _nanmax(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.nanmax(a)) if np.any(np.isfinite(a)) else float("nan")


def convergence_rows(exp: ExperimentConfig):
    if initial_selector(exp).__class__ is not TaylorGreen:
        raise ConfigurationError("converge compares against Taylor-Green; set initial = taylor_green")
    ladder = exp.ladder or [(exp.n, exp.dt)]
    exact = TaylorGreen(exp.dim)
    rows = []
    for level, (n, dt) in enumerate(ladder):
        seq = _run_one(exp, n, dt)
        e0, e1 = diag.solution_errors(seq, exact)
        lhs, factor, rhs = diag.interpolation_gap(seq)
        rows.append({
            "level": level, "n": n, "h": seq.forms.mesh.h, "dt": seq.dt, "N": seq.N,
            "l2l2_error": e0, "l2h1_error": e1, "gap_lhs": lhs, "gap_rhs": rhs,
            "gap_factor": factor, "dual_norm_dtv": diag.dual_norm_time_derivative(seq),
            "pressure_ratio_max": _nanmax(diag.pressure_ratio(seq)),
        })
        log.info("level %d (n=%d, dt=%g): L2L2 error %.4e", level, n, dt, e0)
    # orders against h when the mesh is refined, against dt otherwise
    var = "h" if len({r["n"] for r in rows}) > 1 else "dt"
    for prev, cur in zip(rows, rows[1:]):
        r = np.log(prev[var] / cur[var])
        cur["order_l2l2"] = np.log(prev["l2l2_error"] / cur["l2l2_error"]) / r
        cur["order_l2h1"] = np.log(prev["l2h1_error"] / cur["l2h1_error"]) / r
    if len(rows) > 1:
        xs = [r[var] for r in rows]
        rows.append({"level": "fit", "order_l2l2": fitted_slope(xs, [r["l2l2_error"] for r in rows]),
                     "order_l2h1": fitted_slope(xs, [r["l2h1_error"] for r in rows])})
    return rows


def cmd_converge(exp: ExperimentConfig) -> int:
    rows = convergence_rows(exp)
    exp.out.mkdir(parents=True, exist_ok=True)
    write_csv(exp.out / "convergence.csv", CONVERGENCE_COLUMNS, rows)
    if rows[-1]["level"] == "fit":
        print(f"converge: fitted L2(L2) order {rows[-1]['order_l2l2']:.3f}")
    return EXIT_OK


def lei_rows(sequences, phi_ids):
    rows, per_phi = [], {p: [] for p in phi_ids}
    for seq in sequences:
        traj = diag.ReconstructedTrajectory(seq)
        family = diag.standard_family(seq.config.T)
        for pid in phi_ids:
            rep = diag.lei_functional(traj, family[pid], pid)
            row = {"phi_id": pid, "D": rep.D, "dissipation": rep.dissipation,
                   "transport": rep.transport, "R_visc": rep.R_visc, "R_nl": rep.R_nl,
                   "R_p1": rep.R_p1, "R_p2": rep.R_p2, "I2": rep.I2, "I12": rep.I12}
            rows.append(row)
            per_phi[pid].append((seq.forms.mesh.h, row))
    if len(sequences) > 1:
        for pid, entries in per_phi.items():
            hs = [h for h, _ in entries]
            slope = {"phi_id": f"slope:{pid}"}
            for c in LEI_COLUMNS[1:]:
                slope[c] = fitted_slope(hs, [r[c] for _, r in entries])
            rows.append(slope)
    return rows


def cmd_lei(paths, phi_ids, out: Path) -> int:
    seqs = [read_snapshot(p).to_sequence() for p in paths]
    rows = lei_rows(seqs, phi_ids)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "lei_report.csv", LEI_COLUMNS, rows)
    print(f"lei: {len(seqs)} trajectories x {len(phi_ids)} test functions")
    return EXIT_OK


_PROBE_WEIGHTS = {"g0": lambda: constant_weight(1.0), "g1": cosine_weight,
                  "g2": cosine_product_weight}


def probe_rows(exp: ExperimentConfig):
    rows = []
    weight = _PROBE_WEIGHTS[exp.probe_weight]()
    for n in exp.probe_levels:
        forms = build_forms(exp.dim, n, exp.quad_degree)
        V, P = forms.vspace, forms.pspace
        v = interpolate(V, TaylorGreen(exp.dim))
        rows.append({
            "n": n, "h": forms.mesh.h,
            "coercivity": coercivity_probe(V, P),
            "inverse_constant": inverse_constant_probe(V, samples=exp.probe_samples, seed=exp.seed),
            "commutator_00": commutator_defect(v, weight, 0, 0),
            "commutator_01": commutator_defect(v, weight, 0, 1),
            "commutator_11": commutator_defect(v, weight, 1, 1),
        })
    return rows


def cmd_probe(exp: ExperimentConfig) -> int:
    rows = probe_rows(exp)
    exp.out.mkdir(parents=True, exist_ok=True)
    write_csv(exp.out / "probes.csv", PROBE_COLUMNS, rows)
    print(f"probe: {len(rows)} levels")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thnse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="key = value config file")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="seed for random initial data and probes")
        sp.add_argument("--force-theta-half", action="store_true",
                        help="allow theta = 1/2 (unsupported; interpolation-gap exploration only)")

    common(sub.add_parser("run", help="run the scheme, write snapshots and the energy ledger"))
    common(sub.add_parser("converge", help="Taylor-Green refinement ladder"))
    lei = sub.add_parser("lei", help="local energy functional and remainders from snapshots")
    lei.add_argument("snapshots", nargs="+", help="snapshot files, coarse to fine")
    lei.add_argument("--phi", default="g0,g1,g2", help="comma-separated test function ids")
    lei.add_argument("--out", default="out")
    common(sub.add_parser("probe", help="structural probes of the element pair"))
    return p


def _limit_threads():
    value = os.environ.get("THNSE_THREADS")
    if not value:
        return None
    try:
        k = int(value)
        if k < 1:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"THNSE_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limiter = _limit_threads()  # noqa: F841  (kept alive for the run)
        if args.command == "lei":
            phi_ids = tuple(s.strip() for s in args.phi.split(",") if s.strip())
            bad = [s for s in phi_ids if s not in diag.STANDARD_PHI_IDS]
            if bad:
                raise ConfigurationError(f"unknown test functions {bad}")
            return cmd_lei(args.snapshots, phi_ids, Path(args.out))
        exp = load_config(args.config, force_theta_half=args.force_theta_half, seed=args.seed)
        if args.out:
            exp.out = Path(args.out)
        return {"run": cmd_run, "converge": cmd_converge, "probe": cmd_probe}[args.command](exp)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        where = f" (step {exc.step})" if exc.step is not None else ""
        print(f"solver failure{where}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
