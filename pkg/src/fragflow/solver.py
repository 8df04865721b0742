"""Time evolution of the full model: Picard iteration on the Duhamel
integral (mild solutions), a Strang-splitting cross-check, and window-chained
continuation with blow-up detection.

The Duhamel quadrature marches the history integral with the semigroup,
I(t_k) = G(dt) I(t_{k-1}) + local part, where the local part uses trapezoid
nodes graded geometrically toward the current time so the weakly singular
factor G(t - tau) is integrated accurately.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .coagulation import CoagResult
from .errors import FragflowError, SolverError
from .grids import StateField, classical_moment, moment, weighted_norm
from .transport import SemigroupAction

__all__ = [
    "MildSolveConfig",
    "MomentReport",
    "Trajectory",
    "measure_growth_envelope",
    "predicted_contraction",
    "mild_solve",
    "split_solve",
    "continue_maximal",
]


@dataclass
class MildSolveConfig:
    """Controls for one Picard window.

    ``q_prime`` is the regularization exponent ratio of the linear semigroup
    (0 for bounded kernels); together with the measured growth envelope
    (M_p, omega_p) and the Lipschitz reference L it prices the window length.
    """

    T: float
    dt: float
    r: float
    picard_tol: float = 1e-9
    max_iters: int = 40
    graded_levels: int = 6
    M_p: float = 1.0
    omega_p: float = 0.0
    q_prime: float = 0.0
    lipschitz: float | None = None
    ball: float | None = None
    max_retries: int = 6

    def n_steps(self) -> int:
        n = max(1, int(round(self.T / self.dt)))
        return n


@dataclass
class MomentReport:
    times: list = field(default_factory=list)
    number: list = field(default_factory=list)      # classical M_0
    mass: list = field(default_factory=list)        # classical M_1
    moment_r: list = field(default_factory=list)    # (1+m^r)-weighted
    norm_r: list = field(default_factory=list)
    overflow: list = field(default_factory=list)    # cumulative
    leakage: list = field(default_factory=list)     # cumulative
    absorbed: list = field(default_factory=list)    # cumulative

    def append(self, t, u: StateField, r: float, overflow: float,
               leakage: float, absorbed: float):
        self.times.append(float(t))
        self.number.append(classical_moment(u, 0.0))
        self.mass.append(classical_moment(u, 1.0))
        self.moment_r.append(moment(u, r) if u.norm_mode == "integral" else float("nan"))
        self.norm_r.append(weighted_norm(u, r))
        self.overflow.append(float(overflow))
        self.leakage.append(float(leakage))
        self.absorbed.append(float(absorbed))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "M0", "M1", "Mr", "norm_Xr", "overflow", "leakage", "absorbed"])
            for row in zip(self.times, self.number, self.mass, self.moment_r,
                           self.norm_r, self.overflow, self.leakage, self.absorbed):
                wr.writerow([f"{v:.16e}" for v in row])

    def ledger_residuals(self) -> np.ndarray:
        """Initial mass minus (interior + overflow + leakage + absorbed)."""
        m0 = self.mass[0] + self.overflow[0] + self.leakage[0] + self.absorbed[0]
        tot = (np.asarray(self.mass) + np.asarray(self.overflow)
               + np.asarray(self.leakage) + np.asarray(self.absorbed))
        return m0 - tot


@dataclass
class Trajectory:
    times: list
    fields: list
    report: MomentReport
    termination: str
    extras: dict = field(default_factory=dict)

    @property
    def final(self) -> StateField:
        return self.fields[-1]


def measure_growth_envelope(action: SemigroupAction, probes, t_grid, r: float,
                            safety: float = 1.001) -> tuple[float, float]:
    """Fit an envelope ||G(t)|| <= M e^{omega t} on probe fields.

    Least-squares in log space, then M inflated so the envelope dominates
    every sampled ratio (the window pricing needs an upper bound).
    """
    t_grid = np.asarray([t for t in np.atleast_1d(t_grid) if t > 0], dtype=float)
    ratios = np.zeros_like(t_grid)
    for f in probes:
        nf = weighted_norm(f, r)
        if nf == 0:
            continue
        for i, t in enumerate(t_grid):
            ratios[i] = max(ratios[i], weighted_norm(action.apply(float(t), f), r) / nf)
    if np.all(ratios == 0):
        return 1.0, 0.0
    A = np.vstack([np.ones_like(t_grid), t_grid]).T
    logM, omega = np.linalg.lstsq(A, np.log(ratios), rcond=None)[0]
    M = float(np.exp(logM))
    omega = float(omega)
    # inflate to a true envelope on the samples; the identity at t=0 forces M >= 1
    bump = np.max(ratios / (M * np.exp(omega * t_grid)))
    M = max(M * bump * safety, 1.0)
    return M, omega


def predicted_contraction(cfg: MildSolveConfig) -> float:
    """The fixed-point map's contraction bound on a window of length T:
    M_p e^{omega_p T} T^{1-q'} L / (1-q')."""
    if cfg.lipschitz is None:
        raise FragflowError("predicted contraction needs the Lipschitz reference L")
    qp = cfg.q_prime
    if not 0 <= qp < 1:
        raise FragflowError("require 0 <= q' < 1 for an integrable kernel")
    return (cfg.M_p * np.exp(cfg.omega_p * cfg.T) * cfg.T ** (1 - qp)
            * cfg.lipschitz / (1 - qp))


def _graded_quadrature(dt: float, levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite-Simpson nodes/weights for offsets delta in [0, dt], with the
    partition refined geometrically toward delta = 0 (tau = t), where the
    regularizing factor G(delta) may be singular.  Simpson per subinterval
    keeps the stiff exponential factor of the semigroup accurate."""
    knots = np.concatenate([[0.0], dt * 0.5 ** np.arange(levels, -1, -1.0)])
    nodes = []
    weights = []
    for a, b in zip(knots[:-1], knots[1:]):
        h = b - a
        nodes.extend([a, 0.5 * (a + b), b])
        weights.extend([h / 6.0, 4.0 * h / 6.0, h / 6.0])
    nodes = np.asarray(nodes)
    weights = np.asarray(weights)
    uniq, inv = np.unique(nodes, return_inverse=True)
    acc = np.zeros_like(uniq)
    np.add.at(acc, inv, weights)
    return uniq, acc


def mild_solve(u0: StateField, cfg: MildSolveConfig, linear: SemigroupAction,
               nonlinearity: Callable[[StateField], CoagResult]) -> Trajectory:
    """Picard iteration for u(t) = G(t) u0 + int_0^t G(t - tau) N(u(tau)) dtau
    on the window [0, T].

    Escaping the invariant ball triggers window halving (up to the retry
    cap); non-convergence raises with the measured contraction factor.
    """
    if not u0.is_nonnegative(tol=1e-14):
        raise FragflowError("mild_solve needs a nonnegative initial state")
    ball = cfg.ball if cfg.ball is not None else 2.0 * weighted_norm(u0, cfg.r)
    if ball > 0 and weighted_norm(u0, cfg.r) > 0.5 * ball * (1 + 1e-12):
        raise FragflowError("initial state must satisfy ||u0|| <= ball/2")
    T, dt = cfg.T, cfg.dt
    last_error = None
    for attempt in range(cfg.max_retries + 1):
        try:
            return _mild_window(u0, cfg, linear, nonlinearity, T, dt, ball)
        except _BallEscape as exc:
            last_error = exc
            T, dt = T / 2, dt / 2
    raise SolverError(f"window retries exhausted; iterates keep escaping the ball "
                      f"(last norm {last_error.norm:.3g} > {ball:.3g})")


class _BallEscape(Exception):
    def __init__(self, norm):
        self.norm = norm


def _mild_window(u0, cfg, linear, nonlinearity, T, dt, ball) -> Trajectory:
    n = max(1, int(round(T / dt)))
    dt = T / n
    times = dt * np.arange(n + 1)
    step = linear.step_applier(dt)
    push = step if step is not None else (lambda f: linear.apply(dt, f))
    offsets, quad_w = _graded_quadrature(dt, cfg.graded_levels)
    appliers = {}
    for d in offsets:
        if d == 0.0:
            appliers[d] = lambda f: f
        else:
            s = linear.step_applier(float(d))
            appliers[d] = s if s is not None else (lambda f, d=float(d): linear.apply(d, f))

    seeds = [u0.copy()]
    for _ in range(n):
        seeds.append(push(seeds[-1]))
    iterates = [s.copy() for s in seeds]
    deltas = []
    min_increment = np.inf
    min_vs_seed = np.inf
    converged = False
    n_iter = 0
    overflow_nodes = np.zeros(n + 1)
    for n_iter in range(1, cfg.max_iters + 1):
        cq = []
        for k, u in enumerate(iterates):
            res = nonlinearity(u)
            cq.append(res.field)
            overflow_nodes[k] = res.overflow_rate
        new = [u0.copy()]
        I = u0.copy(values=np.zeros_like(u0.values))
        for k in range(1, n + 1):
            I = push(I)
            # local integral over [t_{k-1}, t_k]: graded composite Simpson;
            # tau = t_k - delta, integrand G(delta) Cq(u(tau)) with Cq
            # interpolated linearly between the step nodes
            local = np.zeros_like(I.values)
            for d, wq in zip(offsets, quad_w):
                theta = 1.0 - d / dt
                interp = cq[k].copy(values=(1 - theta) * cq[k - 1].values
                                    + theta * cq[k].values)
                local += wq * appliers[d](interp).values
            I = I.copy(values=I.values + local)
            new.append(u0.copy(values=seeds[k].values + I.values))
        norms = [weighted_norm(f, cfg.r) for f in new]
        if ball > 0 and max(norms) > ball * (1 + 1e-10):
            raise _BallEscape(max(norms))
        delta = max(weighted_norm(a.copy(values=a.values - b.values), cfg.r)
                    for a, b in zip(new, iterates))
        inc = min(float(np.min(a.values - b.values)) for a, b in zip(new, iterates))
        min_increment = min(min_increment, inc)
        # the Duhamel term only adds for positive nonlinearities, so every
        # iterate dominates the linear seed exactly
        min_vs_seed = min(min_vs_seed,
                          min(float(np.min(a.values - s.values))
                              for a, s in zip(new, seeds)))
        iterates = new
        deltas.append(delta)
        if delta <= cfg.picard_tol:
            converged = True
            break
    if not converged:
        factors = [b / a for a, b in zip(deltas, deltas[1:]) if a > 0]
        raise SolverError(f"Picard did not converge in {cfg.max_iters} iterations; "
                          f"measured contraction factor "
                          f"{max(factors) if factors else float('nan'):.3g}")
    factors = [b / a for a, b in zip(deltas, deltas[1:]) if a > 0]
    measured = max(factors) if factors else 0.0
    report = MomentReport()
    cum_overflow = np.concatenate([[0.0], np.cumsum(0.5 * dt * (overflow_nodes[:-1]
                                                                + overflow_nodes[1:]))])
    for k, (t, f) in enumerate(zip(times, iterates)):
        report.append(t, f, cfg.r, overflow=cum_overflow[k], leakage=0.0, absorbed=0.0)
    extras = {"picard_iterations": n_iter, "deltas": deltas,
              "measured_contraction": measured, "ball": ball,
              "min_iterate_increment": min_increment,
              "min_iterate_vs_seed": min_vs_seed, "dt": dt, "T": T}
    if cfg.lipschitz is not None:
        window_cfg = MildSolveConfig(**{**cfg.__dict__, "T": T, "dt": dt})
        extras["predicted_contraction"] = predicted_contraction(window_cfg)
    return Trajectory(times=list(times), fields=iterates, report=report,
                      termination="horizon", extras=extras)


# ---------------------------------------------------------------------------
# operator splitting


def split_solve(u0: StateField, T: float, dt: float, r: float,
                transport: SemigroupAction | None = None,
                frag=None, coag_kernel=None,
                negative_mass_tol: float = 1e-6) -> Trajectory:
    """Strang splitting: half transport, half fragmentation, full explicit
    coagulation (Heun), half fragmentation, half transport per step.

    Positivity clips are tallied; a step that must clip more mass than the
    tolerance allows is rejected.
    """
    if not u0.is_nonnegative(tol=1e-14):
        raise FragflowError("split_solve needs a nonnegative initial state")
    from .coagulation import coag_apply  # deferred: solver <-> coagulation
    n = max(1, int(round(T / dt)))
    dt = T / n
    u = u0.copy()
    report = MomentReport()
    report.append(0.0, u, r, 0.0, 0.0, 0.0)
    times = [0.0]
    fields = [u.copy()]
    overflow = leakage = absorbed = 0.0
    clipped_total = 0.0
    for k in range(n):
        if transport is not None:
            u, leak = _transport_half(transport, dt / 2, u)
            leakage += leak
        if frag is not None:
            u = frag.fragment_step(u, dt / 2)
        if coag_kernel is not None:
            mass_before = classical_moment(u, 1.0)
            r1 = coag_apply(u, u, coag_kernel)
            u1 = u.copy(values=u.values + dt * r1.field.values)
            u1v = np.clip(u1.values, 0.0, None)
            clip1 = classical_moment(u1.copy(values=u1v - u1.values), 1.0)
            u1 = u1.copy(values=u1v)
            r2 = coag_apply(u1, u1, coag_kernel)
            nv = u.values + 0.5 * dt * (r1.field.values + r2.field.values)
            clipped = np.clip(nv, 0.0, None) - nv
            clip2 = classical_moment(u.copy(values=clipped), 1.0)
            clipped_step = abs(clip1) + abs(clip2)
            clipped_total += clipped_step
            if mass_before > 0 and clipped_step > negative_mass_tol * mass_before:
                raise SolverError(f"splitting step {k} clips {clipped_step:.3g} mass "
                                  f"(> {negative_mass_tol:.1g} relative); reduce dt")
            u = u.copy(values=nv + clipped)
            overflow += 0.5 * dt * (r1.overflow_rate + r2.overflow_rate)
        if frag is not None:
            u = frag.fragment_step(u, dt / 2)
        if transport is not None:
            u, leak = _transport_half(transport, dt / 2, u)
            leakage += leak
        t = (k + 1) * dt
        times.append(t)
        fields.append(u.copy())
        report.append(t, u, r, overflow, leakage, absorbed)
    return Trajectory(times=times, fields=fields, report=report,
                      termination="horizon",
                      extras={"clipped_mass": clipped_total, "dt": dt})


def _transport_half(action: SemigroupAction, h: float, u: StateField):
    out = action.apply(h, u)
    leak = getattr(action, "last_diagnostics", {}).get("outflow_mass", 0.0)
    return out, float(leak)


# ---------------------------------------------------------------------------
# maximal continuation


def continue_maximal(u0: StateField, horizon: float, r: float,
                     make_window: Callable[[StateField, float], tuple],
                     base_cfg: MildSolveConfig,
                     window_floor: float = 1e-7,
                     growth_factor: float = 10.0,
                     auto_window: bool = True) -> Trajectory:
    """Chain mild-solution windows up to the horizon.

    ``make_window(u, ball) -> (cfg, linear, nonlinearity)`` rebuilds the
    shifted problem from the current state (the ball, hence the shift rate,
    tracks the solution norm).  Suspected blow-up is declared when the priced
    window length falls under the floor while the norm keeps growing.
    """
    t = 0.0
    times = [0.0]
    fields = [u0.copy()]
    report = MomentReport()
    report.append(0.0, u0, r, 0.0, 0.0, 0.0)
    u = u0
    ref_norm = weighted_norm(u0, r)  # norm when windows were last healthy
    windows = 0
    termination = "horizon"
    extras: dict = {"windows": []}
    while t < horizon - 1e-12:
        norm = weighted_norm(u, r)
        if norm == 0.0:
            # zero state stays zero: jump to the horizon
            for tt in np.linspace(t, horizon, 3)[1:]:
                times.append(float(tt))
                fields.append(u.copy())
                report.append(tt, u, r, report.overflow[-1], report.leakage[-1],
                              report.absorbed[-1])
            break
        ball = 2.0 * norm
        cfg, linear, nonlinearity = make_window(u, ball)
        if auto_window and cfg.lipschitz is not None:
            T = _price_window(cfg, horizon - t)
            if T >= window_floor:
                ref_norm = norm
            else:
                # contraction pricing collapsed: declare blow-up once the
                # norm has run far beyond the last healthy window
                if norm > growth_factor * ref_norm:
                    termination = "suspected-blowup"
                    break
                T = min(window_floor, horizon - t)
            cfg = MildSolveConfig(**{**cfg.__dict__, "T": T,
                                     "dt": T / max(1, cfg.n_steps())})
        window = mild_solve(u, cfg, linear, nonlinearity)
        off_over = report.overflow[-1]
        off_leak = report.leakage[-1]
        off_abs = report.absorbed[-1]
        for k in range(1, len(window.times)):
            times.append(t + window.times[k])
            fields.append(window.fields[k])
            report.append(t + window.times[k], window.fields[k], r,
                          off_over + window.report.overflow[k],
                          off_leak + window.report.leakage[k],
                          off_abs + window.report.absorbed[k])
        extras["windows"].append({"t0": t, "T": window.extras["T"],
                                  "iterations": window.extras["picard_iterations"],
                                  "ball": window.extras["ball"]})
        prev_norm = norm
        t += window.extras["T"]
        u = window.fields[-1]
        windows += 1
        if windows > 100000:
            raise SolverError("window budget exhausted before the horizon")
    extras["n_windows"] = windows
    return Trajectory(times=times, fields=fields, report=report,
                      termination=termination, extras=extras)


def _price_window(cfg: MildSolveConfig, t_left: float, target: float = 0.5) -> float:
    """Largest T <= t_left with predicted contraction below the target."""
    lo, hi = 0.0, t_left
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        c = MildSolveConfig(**{**cfg.__dict__, "T": mid})
        if predicted_contraction(c) < target:
            lo = mid
        else:
            hi = mid
    return max(lo, 1e-12)
