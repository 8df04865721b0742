"""Scenario-driven command line: parse a TOML config, run a simulation or a
certificate suite, and emit plot-ready CSV / JSON / binary artifacts."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import catalog
from .coagulation import TruncatedCoagulation, lipschitz_probe, truncated_coag
from .errors import ConfigError, FragflowError
from .fragmentation import (
    FragmentationAction,
    FragmentationOperator,
    commutation_check,
    miyadera_lambda_star,
    miyadera_margin,
    moment_inequality_check,
)
from .grids import (
    MassGrid,
    SpatialGrid,
    StateField,
    classical_moment,
    weighted_norm,
    write_field_binary,
)
from .kernels import (
    check_domination,
    check_equi_integrability,
    check_mass_conservation,
    find_r1,
)
from .solver import MildSolveConfig, Trajectory, continue_maximal, split_solve
from .transport import (
    AbsorptionAction,
    AdvectionAction,
    DiffusionAction,
    gronwall_flow_check,
)

__all__ = ["run", "list_builtins", "main", "load_scenario", "Scenario"]

_DEFAULTS = {
    "name": "scenario",
    "mode": "simulate",
    "seed": 0,
    "grids": {
        "mass": {"n": 256, "m_max": 20.0, "spacing": "uniform", "ratio": 1.01},
        "space": {"n": 2, "dim": 1, "bounds": [0.0, 1.0],
                  "boundary": "whole-space-truncated"},
    },
    "kernels": {},
    "transport": {"kind": "none"},
    "initial": {"mass": {"kind": "exponential"}, "space": {"kind": "uniform"}},
    "solver": {"method": "split", "t_max": 1.0, "dt": 0.01, "r": 2.0,
               "norm_mode": "integral", "snapshot_times": [],
               "picard_tol": 1e-9, "window": 0.05, "steps_per_window": 4,
               "auto_window": False},
    "certify": {},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class Scenario:
    config: dict
    space: SpatialGrid
    mass: MassGrid
    initial: StateField
    absorption: object = None
    daughter: object = None
    dominating: object = None
    coagulation: object = None
    velocity: object = None
    diffusion: object = None
    violations: list = field(default_factory=list)

    @property
    def r(self) -> float:
        return float(self.config["solver"]["r"])


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    cfg = _merge(_DEFAULTS, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    violations: list[str] = []

    g = cfg["grids"]["mass"]
    scale = float(cfg.get("resolution_scale", 1.0))
    n_m = max(2, int(round(g["n"] * scale)))
    if g["spacing"] == "geometric":
        mass = MassGrid.geometric(n_m, float(g["m_max"]), float(g["ratio"]))
    else:
        mass = MassGrid.uniform(n_m, float(g["m_max"]))
    gs = cfg["grids"]["space"]
    n_x = max(2, int(round(gs["n"] * scale)))
    lo, hi = (float(b) for b in gs["bounds"])
    if gs["dim"] == 1:
        space = SpatialGrid.line(n_x, lo, hi, boundary=gs["boundary"])
    else:
        space = SpatialGrid.box(n_x, lo, hi, boundary=gs["boundary"])

    sc = Scenario(config=cfg, space=space, mass=mass, initial=None)

    def build(slot, builder, spec):
        if not spec:
            return None
        try:
            kind = spec.get("kind")
            params = {k: v for k, v in spec.items() if k not in ("kind", "M")}
            return builder(kind, **params)
        except ConfigError as exc:
            violations.extend(f"{slot}: {v}" for v in exc.violations)
            return None

    k = cfg["kernels"]
    sc.absorption = build("absorption", catalog.build_absorption, k.get("absorption"))
    sc.daughter = build("daughter", catalog.build_daughter, k.get("daughter"))
    sc.dominating = build("dominating", catalog.build_dominating, k.get("dominating"))
    sc.coagulation = build("coagulation", catalog.build_coagulation, k.get("coagulation"))
    tr = cfg["transport"]
    tr_params = {kk: v for kk, v in tr.items() if kk != "kind"}
    try:
        if tr["kind"].startswith("diffusion-"):
            sc.diffusion = catalog.build_diffusion(tr["kind"].split("-", 1)[1], **tr_params)
        else:
            sc.velocity = catalog.build_velocity(tr["kind"], **tr_params)
    except ConfigError as exc:
        violations.extend(f"transport: {v}" for v in exc.violations)

    try:
        sc.initial = catalog.build_initial(space, mass, cfg["initial"]["mass"],
                                           cfg["initial"]["space"],
                                           norm_mode=cfg["solver"]["norm_mode"])
    except ConfigError as exc:
        violations.extend(f"initial: {v}" for v in exc.violations)

    # parameter orderings of the theory
    r = float(cfg["solver"]["r"])
    if sc.daughter is not None and r <= max(1.0, sc.daughter.l):
        violations.append(f"r>max{{1,l}} violated: r = {r}, l = {sc.daughter.l}")
    if sc.coagulation is not None:
        q = float(sc.coagulation.q)
        gamma = getattr(sc.absorption, "gamma", None) if sc.absorption else None
        if sc.absorption is not None and gamma is not None and q >= gamma:
            violations.append(f"q<gamma violated: q = {q}, gamma = {gamma}")
        if r < q:
            violations.append(f"r>=q violated: r = {r}, q = {q}")
        if mass.spacing != "uniform":
            violations.append("coagulation requires a uniform mass grid")
    if float(cfg["solver"]["t_max"]) <= 0:
        violations.append("t_max must be positive")
    if float(cfg["solver"]["dt"]) <= 0:
        violations.append("dt must be positive")
    sc.violations = violations
    return sc


# ---------------------------------------------------------------------------
# simulate


def _build_transport_action(sc: Scenario):
    if sc.velocity is not None:
        return AdvectionAction(sc.velocity, None)
    if sc.diffusion is not None:
        return DiffusionAction(sc.diffusion)
    return None


def _simulate(sc: Scenario, outdir: Path) -> tuple[int, dict]:
    cfg = sc.config["solver"]
    r = sc.r
    t_max = float(cfg["t_max"])
    dt = float(cfg["dt"])
    frag = None
    if sc.daughter is not None and sc.absorption is not None:
        frag = FragmentationOperator(sc.mass, sc.absorption, sc.daughter)
    transport = _build_transport_action(sc)
    if sc.absorption is not None and frag is None and transport is None:
        transport = AbsorptionAction(sc.absorption)

    if cfg["method"] == "mild":
        if sc.coagulation is None:
            raise ConfigError("mild method needs a coagulation kernel")

        kernel = sc.coagulation

        def make_window(u, ball):
            tc = TruncatedCoagulation(kernel, ball=ball, r=r)
            consts = tc.constants()
            if frag is not None:
                linear = FragmentationAction(frag, extra_decay=tc.shift_rate)
            else:
                linear = AbsorptionAction(tc.shift_absorption())
            w_cfg = MildSolveConfig(
                T=float(cfg["window"]), dt=float(cfg["window"]) / int(cfg["steps_per_window"]),
                r=r, ball=ball, picard_tol=float(cfg["picard_tol"]),
                lipschitz=consts["L"] if cfg.get("auto_window") else None)
            return w_cfg, linear, (lambda v: truncated_coag(v, tc))

        base = MildSolveConfig(T=float(cfg["window"]),
                               dt=float(cfg["window"]) / int(cfg["steps_per_window"]), r=r)
        traj = continue_maximal(sc.initial, t_max, r, make_window, base,
                                auto_window=bool(cfg.get("auto_window")))
    else:
        traj = split_solve(sc.initial, t_max, dt, r=r, transport=transport,
                           frag=frag, coag_kernel=sc.coagulation)

    outdir.mkdir(parents=True, exist_ok=True)
    traj.report.to_csv(outdir / "moments.csv")
    snap_dir = outdir / "fields"
    snaps = [float(t) for t in cfg.get("snapshot_times", [])]
    if snaps:
        snap_dir.mkdir(exist_ok=True)
        times = np.asarray(traj.times)
        for t_want in snaps:
            k = int(np.argmin(np.abs(times - t_want)))
            write_field_binary(traj.fields[k], snap_dir / f"u_t{times[k]:.6f}.bin")
    residual = float(np.max(np.abs(traj.report.ledger_residuals())))
    summary = {
        "termination": traj.termination,
        "final_time": traj.times[-1],
        "ledger_max_residual": residual,
        "final_mass": traj.report.mass[-1],
        "final_number": traj.report.number[-1],
        "overflow": traj.report.overflow[-1],
        "leakage": traj.report.leakage[-1],
        "extras": {k: v for k, v in traj.extras.items()
                   if isinstance(v, (int, float, str))},
    }
    code = 3 if traj.termination == "suspected-blowup" else 0
    return code, summary


# ---------------------------------------------------------------------------
# certify


def _certify(sc: Scenario, rng: np.random.Generator) -> list:
    certs = []
    cc = sc.config.get("certify", {})
    s_grid = np.geomspace(float(cc.get("s_min", 1.0)), float(cc.get("s_max", 1e4)),
                          int(cc.get("s_samples", 40)))
    if sc.daughter is not None:
        certs.append(check_mass_conservation(sc.daughter, [None], s_grid[:12],
                                             tol=float(cc.get("mass_tol", 1e-6))))
    if sc.dominating is not None and sc.daughter is not None:
        certs.append(check_domination(sc.daughter, sc.dominating, [None],
                                      np.linspace(0.01, s_grid[-1], 200), s_grid[:12]))
    if sc.dominating is not None:
        beta = sc.dominating
        certs.append(check_equi_integrability(
            beta, r0=beta.r0, s0=beta.s0, eta=float(cc.get("eta", 0.5)),
            p=float(cc.get("p", 2.0)), b1_bound=float(cc.get("b1_bound", 2.5)),
            b2_bound=float(cc.get("b2_bound", 2.5)),
            s_samples=s_grid[s_grid >= beta.s0]))
        M = float(cc.get("M", getattr(sc.absorption, "M", 1.0) if sc.absorption else 1.0))
        certs.append(find_r1(beta, M=M, s_grid=s_grid[s_grid >= beta.s0],
                             r_max=float(cc.get("r_max", 12.0))))
    if sc.daughter is not None and sc.absorption is not None and cc.get("miyadera", True):
        frag = FragmentationOperator(sc.mass, sc.absorption, sc.daughter)
        beta0 = sc.dominating.beta0 if sc.dominating is not None else sc.daughter.b0
        l = sc.dominating.l if sc.dominating is not None else sc.daughter.l
        s0 = sc.dominating.s0 if sc.dominating is not None else 2.5
        lam = miyadera_lambda_star(sc.absorption, beta0=beta0, l=l, s0=s0)
        probes = _random_probes(sc, rng, int(cc.get("miyadera_probes", 10)))
        act = AbsorptionAction(sc.absorption)
        cert = miyadera_margin(lam, probes, act, frag, r=sc.r,
                               n_nodes=int(cc.get("resolvent_nodes", 2000)))
        cert.evidence["lambda_star"] = lam
        certs.append(cert)
    if sc.velocity is not None:
        pairs = []
        for _ in range(8):
            x = rng.normal(size=sc.velocity.dim)
            y = rng.normal(size=sc.velocity.dim)
            pairs.append(((x, 0.5), (y, 0.5)))
        certs.append(gronwall_flow_check(sc.velocity, pairs, t=1.0))
    return certs


def _random_probes(sc: Scenario, rng: np.random.Generator, n: int) -> list:
    probes = []
    m = sc.mass.centers
    for _ in range(n):
        c = rng.uniform(0.2, 0.7 * sc.mass.m_max)
        w = rng.uniform(0.2, 2.0)
        vals = np.exp(-((m - c) / w) ** 2)
        probes.append(StateField(sc.space, sc.mass,
                                 np.broadcast_to(vals, tuple(sc.space.shape) + (sc.mass.n,)).copy(),
                                 norm_mode=sc.config["solver"]["norm_mode"]))
    return probes


# ---------------------------------------------------------------------------
# verify-suite


def _verify_suite(sc: Scenario, rng: np.random.Generator) -> list:
    from .kernels import Certificate

    certs = []
    u = sc.initial
    transport = _build_transport_action(sc)
    if transport is not None:
        ident = transport.apply(0.0, u)
        d0 = weighted_norm(ident.copy(values=ident.values - u.values), sc.r)
        certs.append(Certificate(kind="apply-zero-identity", passed=d0 <= 1e-12,
                                 margin=1e-12 - d0, evidence={"difference": d0}))
        out = transport.apply(0.2, u)
        n_in, n_out = weighted_norm(u, sc.r), weighted_norm(out, sc.r)
        certs.append(Certificate(kind="substochastic", passed=n_out <= n_in * (1 + 1e-6),
                                 margin=n_in - n_out,
                                 evidence={"norm_in": n_in, "norm_out": n_out}))
        certs.append(Certificate(kind="positivity", passed=out.values.min() >= 0,
                                 margin=float(out.values.min()), evidence={}))
    if sc.daughter is not None and sc.absorption is not None:
        frag = FragmentationOperator(sc.mass, sc.absorption, sc.daughter)
        colmass = sc.mass.centers @ frag.allocation
        n1 = np.array([_n1(sc.daughter, s) for s in sc.mass.centers])
        dev = float(np.max(np.abs(colmass - n1) / np.maximum(n1, 1e-300)))
        certs.append(Certificate(kind="gain-column-mass", passed=dev <= 1e-12,
                                 margin=1e-12 - dev, evidence={"max_rel_dev": dev}))
        if (transport is not None and getattr(transport, "field", None) is not None
                and transport.field.m_independent and sc.daughter.x_independent
                and sc.absorption.x_independent):
            certs.append(commutation_check(0.5, u, transport, FragmentationAction(frag)))
        dt = float(sc.config["solver"]["dt"])
        times = [0.0]
        fields = [u]
        for _ in range(10):
            fields.append(frag.fragment_step(fields[-1], dt))
            times.append(times[-1] + dt)
        if sc.r > 1:
            certs.append(moment_inequality_check(times, fields, frag, r=sc.r))
    if sc.coagulation is not None and sc.mass.spacing == "uniform":
        ball = 2.0 * weighted_norm(u, sc.r)
        if ball > 0:
            tc = TruncatedCoagulation(sc.coagulation, ball=ball, r=sc.r)
            pairs = []
            for _ in range(4):
                fa = u.copy(values=u.values * rng.uniform(0.3, 1.0))
                fb = u.copy(values=u.values * rng.uniform(0.3, 1.0))
                pairs.append((fa, fb))
            certs.append(lipschitz_probe(tc, pairs))
    return certs


def _n1(daughter, s: float) -> float:
    from .kernels import moment_n_r

    n1, _ = moment_n_r(daughter, None, float(s), 1.0)
    return n1


# ---------------------------------------------------------------------------
# entry points


def run(config_path, mode: str | None = None, output: str | None = None,
        seed: int | None = None, resolution_scale: float | None = None,
        tmax: float | None = None) -> int:
    """Execute a scenario; returns the process exit code."""
    overrides: dict = {}
    if mode is not None:
        overrides["mode"] = mode
    if seed is not None:
        overrides["seed"] = int(seed)
    if resolution_scale is not None:
        overrides["resolution_scale"] = float(resolution_scale)
    if tmax is not None:
        overrides["solver"] = {"t_max": float(tmax)}
    try:
        sc = load_scenario(config_path, overrides)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1
    if sc.violations:
        for v in sc.violations:
            print(f"config violation: {v}", file=sys.stderr)
        return 1
    outdir = Path(output) if output else Path(sc.config.get("output_dir", "out")) / sc.config["name"]
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(int(sc.config["seed"]))
    started = time.time()
    report = {"config": sc.config, "seed": int(sc.config["seed"])}
    code = 0
    try:
        mode_eff = sc.config["mode"]
        if mode_eff == "simulate":
            code, summary = _simulate(sc, outdir)
            report["simulate"] = summary
        elif mode_eff == "certify":
            certs = _certify(sc, rng)
            (outdir / "certificates.json").write_text(
                json.dumps([c.to_dict() for c in certs], indent=2))
            report["certificates"] = [c.to_dict() for c in certs]
            if any(not c.passed for c in certs):
                code = 2
        elif mode_eff == "verify-suite":
            certs = _verify_suite(sc, rng)
            (outdir / "certificates.json").write_text(
                json.dumps([c.to_dict() for c in certs], indent=2))
            report["certificates"] = [c.to_dict() for c in certs]
            if any(not c.passed for c in certs):
                code = 2
        else:
            print(f"error: unknown mode {mode_eff!r}", file=sys.stderr)
            return 1
    except (FragflowError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        report["error"] = str(exc)
        (outdir / "report.json").write_text(json.dumps(report, indent=2, default=str))
        return 1
    report["runtime_seconds"] = time.time() - started
    (outdir / "report.json").write_text(json.dumps(report, indent=2, default=str))
    for cert in report.get("certificates", []):
        print(f"[{cert['verdict']}] {cert['kind']} (margin {cert['margin']:.3g})")
    if "simulate" in report:
        s = report["simulate"]
        print(f"{sc.config['name']}: {s['termination']} at t = {s['final_time']:.4g}, "
              f"mass {s['final_mass']:.6g}, ledger residual {s['ledger_max_residual']:.3g}")
    return code


def list_builtins(as_json: bool = False, stream=None) -> int:
    stream = stream or sys.stdout
    data = catalog.catalog_data()
    if as_json:
        json.dump(data, stream, indent=2)
        stream.write("\n")
        return 0
    for group, entries in data.items():
        stream.write(f"{group}:\n")
        for name, spec in entries.items():
            params = ", ".join(f"{k}={v}" for k, v in spec["params"].items()) or "-"
            stream.write(f"  {name:22s} {spec['doc']}  [params: {params}]\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fragflow",
                                     description="Transport-fragmentation-coagulation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("--config", required=True, help="path to the scenario TOML")
    p_run.add_argument("--mode", choices=["simulate", "certify", "verify-suite"])
    p_run.add_argument("--output", help="artifact directory")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--resolution-scale", type=float)
    p_run.add_argument("--tmax", type=float)
    p_list = sub.add_parser("list-builtins", help="print the builtin catalog")
    p_list.add_argument("--json", action="store_true")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, mode=args.mode, output=args.output, seed=args.seed,
                   resolution_scale=args.resolution_scale, tmax=args.tmax)
    return list_builtins(as_json=args.json)


if __name__ == "__main__":
    raise SystemExit(main())
