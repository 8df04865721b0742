"""Model coefficients (absorption rate, daughter/dominating/coagulation
kernels) and the kernel certificates: mass conservation, equi-integrability,
the generation-threshold exponent search, and pointwise domination.

Built-in kernels carry closed forms where they exist (exact normalized
moments, large-parent limits, per-segment integrals for the gain assembly);
everything else falls back to quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import FragflowError, GridError

__all__ = [
    "AbsorptionRate",
    "DaughterKernel",
    "DominatingKernel",
    "CoagulationKernel",
    "Certificate",
    "moment_n_r",
    "normalized_moment",
    "check_mass_conservation",
    "check_equi_integrability",
    "find_r1",
    "check_domination",
]


@dataclass
class Certificate:
    """Machine-readable verdict of a kernel/operator condition.

    ``margin`` is the kind-specific slack; its sign must agree with the
    verdict (mass-conservation and domination pass on small/nonpositive
    margins, threshold and Miyadera checks pass on positive ones).
    """

    kind: str
    passed: bool
    margin: float
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.margin = float(self.margin)

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict:
        def _clean(v):
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: _clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [_clean(x) for x in v]
            return v

        out = {
            "kind": self.kind,
            "verdict": self.verdict,
            "margin": float(self.margin),
            "evidence": _clean(self.evidence),
        }
        # hoist the common evidence fields for flat consumers
        for key in ("worst_point", "samples_used"):
            if key in self.evidence:
                out[key] = _clean(self.evidence[key])
        return out


# ---------------------------------------------------------------------------
# absorption rate


@dataclass
class AbsorptionRate:
    """Fragmentation/absorption rate a(x, m) with its x-uniform envelopes.

    ``rate(coords, m)`` takes a tuple of coordinate arrays (or None when
    x-independent) and broadcasts against ``m``.  The envelopes satisfy
    alpha1 <= a <= alpha2 <= M * alpha1; the optional growth parameters
    (a0, gamma, m0) assert alpha1(m) >= a0 m^gamma for m >= m0.
    """

    rate: Callable
    alpha1: Callable
    alpha2: Callable
    M: float = 1.0
    a0: float | None = None
    gamma: float | None = None
    m0: float | None = None
    x_independent: bool = True
    name: str = "custom"

    def __call__(self, coords, m):
        return np.asarray(self.rate(coords, m), dtype=float)

    @classmethod
    def power_law(cls, a0: float, gamma: float, m0: float = 1.0) -> "AbsorptionRate":
        fn = lambda coords, m: a0 * np.asarray(m, dtype=float) ** gamma
        env = lambda m: a0 * np.asarray(m, dtype=float) ** gamma
        return cls(rate=fn, alpha1=env, alpha2=env, M=1.0, a0=a0, gamma=gamma, m0=m0,
                   name=f"power-law(a0={a0}, gamma={gamma})")

    @classmethod
    def linear(cls) -> "AbsorptionRate":
        return cls.power_law(1.0, 1.0)

    @classmethod
    def constant(cls, c: float) -> "AbsorptionRate":
        env = lambda m: np.full_like(np.asarray(m, dtype=float), c)
        return cls(rate=lambda coords, m: env(m), alpha1=env, alpha2=env,
                   M=1.0, name=f"constant({c})")

    @classmethod
    def zero(cls) -> "AbsorptionRate":
        return cls.constant(0.0)

    @classmethod
    def modulated(cls, base: "AbsorptionRate", modulation: Callable,
                  mod_lo: float, mod_hi: float) -> "AbsorptionRate":
        """x-dependent rate g(x) * alpha(m) with g in [mod_lo, mod_hi]."""
        if not (0 < mod_lo <= mod_hi):
            raise FragflowError("modulation bounds must satisfy 0 < lo <= hi")
        a1 = base.alpha1

        def fn(coords, m):
            g = modulation(coords) if coords is not None else 1.0
            return np.asarray(g) * np.asarray(a1(m), dtype=float)

        return cls(rate=fn,
                   alpha1=lambda m: mod_lo * np.asarray(a1(m), dtype=float),
                   alpha2=lambda m: mod_hi * np.asarray(a1(m), dtype=float),
                   M=mod_hi / mod_lo, a0=(base.a0 * mod_lo if base.a0 else None),
                   gamma=base.gamma, m0=base.m0, x_independent=False,
                   name=f"modulated({base.name})")

    def validate_on(self, m_samples: np.ndarray, coords_samples=None,
                    tol: float = 1e-9) -> None:
        m = np.asarray(m_samples, dtype=float)
        a1, a2 = np.asarray(self.alpha1(m)), np.asarray(self.alpha2(m))
        if np.any(a1 < -tol) or np.any(a2 > self.M * a1 + tol):
            raise FragflowError("rate envelopes violate 0 <= alpha1, alpha2 <= M*alpha1")
        probe = [None] if self.x_independent else list(coords_samples or [])
        for c in probe:
            a = self(c, m)
            if np.any(a < a1 - tol) or np.any(a > a2 + tol):
                raise FragflowError("sampled rate leaves its envelopes")
        if self.a0 is not None:
            sel = m >= (self.m0 or 1.0)
            if np.any(a1[sel] < self.a0 * m[sel] ** self.gamma - tol):
                raise FragflowError("alpha1 violates the a0*m^gamma growth floor")


# ---------------------------------------------------------------------------
# daughter kernels


@dataclass
class DaughterKernel:
    """Daughter mass distribution b(x, m, s), supported on m <= s.

    ``density(coords, m, s)`` broadcasts; x-independent kernels ignore
    coords.  ``segment_moments(lo, hi, s)`` returns the exact number and
    first mass moment of b(., s) over [lo, hi] when a closed form exists
    (used by the gain-matrix assembly); otherwise Gauss quadrature is used.
    """

    density: Callable
    b0: float = 1.0
    l: float = 0.0
    x_independent: bool = True
    name: str = "custom"
    segment_moments: Callable | None = None

    def __call__(self, coords, m, s):
        m = np.asarray(m, dtype=float)
        s = np.asarray(s, dtype=float)
        out = np.asarray(self.density(coords, m, s), dtype=float)
        return np.where(m <= s, out, 0.0)

    @classmethod
    def uniform_binary(cls) -> "DaughterKernel":
        """b = 2/s: two daughters, uniformly distributed sizes."""

        def seg(lo, hi, s):
            lo = np.minimum(lo, s)
            hi = np.minimum(hi, s)
            num = 2.0 / s * np.clip(hi - lo, 0.0, None)
            mom = (hi**2 - lo**2) / s
            return num, np.clip(mom, 0.0, None)

        return cls(density=lambda c, m, s: 2.0 / s, b0=1.0, l=0.0,
                   name="uniform-binary", segment_moments=seg)

    @classmethod
    def homogeneous(cls, profile: Callable, n0: float, name: str = "homogeneous") -> "DaughterKernel":
        """b(m, s) = h(m/s)/s for a daughter-fraction profile h on [0, 1]."""
        return cls(density=lambda c, m, s: profile(np.clip(m / s, 0.0, 1.0)) / s,
                   b0=max(n0 / 2.0, 1.0), l=0.0, name=name)

    @classmethod
    def power_law(cls, nu: float) -> "DaughterKernel":
        """Homogeneous profile h(z) = (nu+2) z^nu; mass conserving, with
        n0 = (nu+2)/(nu+1) daughters per split."""
        if nu < 0:
            raise FragflowError("power-law exponent must be nonnegative")

        def seg(lo, hi, s):
            lo = np.minimum(lo, s)
            hi = np.minimum(hi, s)
            num = (nu + 2) / (nu + 1) * (hi ** (nu + 1) - lo ** (nu + 1)) / s ** (nu + 1)
            mom = (hi ** (nu + 2) - lo ** (nu + 2)) / s ** (nu + 1)
            return np.clip(num, 0.0, None), np.clip(mom, 0.0, None)

        return cls(density=lambda c, m, s: (nu + 2) * m**nu / s ** (nu + 1),
                   b0=(nu + 2) / (nu + 1) / 2 if nu > 0 else 2.0, l=0.0,
                   name=f"power-law(nu={nu})", segment_moments=seg)

    @classmethod
    def scaled(cls, base: "DaughterKernel", factor: Callable, lo: float, hi: float,
               name: str | None = None) -> "DaughterKernel":
        """x-modulated kernel g(x) * b(m, s) with g in [lo, hi] (breaks mass
        conservation unless g == 1; used for domination tests)."""
        return cls(density=lambda c, m, s: (factor(c) if c is not None else 1.0)
                   * base.density(c, m, s),
                   b0=base.b0 * hi, l=base.l, x_independent=False,
                   name=name or f"scaled({base.name})")

    @classmethod
    def homogeneous_table(cls, z_nodes, h_values, name: str = "homogeneous-table") -> "DaughterKernel":
        """Homogeneous kernel with a tabulated daughter-fraction profile,
        linearly interpolated on [0, 1]."""
        z_nodes = np.asarray(z_nodes, dtype=float)
        h_values = np.asarray(h_values, dtype=float)
        if z_nodes.ndim != 1 or z_nodes.size != h_values.size or z_nodes.size < 2:
            raise FragflowError("profile table needs matching 1D nodes and values")
        if np.any(h_values < 0):
            raise FragflowError("profile table must be nonnegative")
        prof = lambda z: np.interp(np.clip(z, 0.0, 1.0), z_nodes, h_values)
        n0 = float(np.trapezoid(prof(np.linspace(0, 1, 4097)), np.linspace(0, 1, 4097)))
        return cls.homogeneous(prof, n0=n0, name=name)


@dataclass
class DominatingKernel:
    """x-independent kernel beta(m, s) >= b(x, m, s), supported on m <= s.

    ``profile`` marks a homogeneous kernel beta = h(m/s)/s whose normalized
    moments are s-independent.  ``slab`` marks the two-population built-in
    (daughters piled near 0 and near the parent) with parameter b2; its
    normalized moments converge to b2 for parents s -> infinity.
    """

    density: Callable
    beta0: float
    l: float
    r0: float = 0.0
    s0: float = 1.0
    profile: Callable | None = None
    b2: float | None = None
    name: str = "custom"

    def __call__(self, m, s):
        m = np.asarray(m, dtype=float)
        s = np.asarray(s, dtype=float)
        return np.where(m <= s, np.asarray(self.density(m, s), dtype=float), 0.0)

    def as_daughter(self) -> DaughterKernel:
        """View as an x-independent daughter kernel (for the dominating
        evolution, which reuses the fragmentation machinery)."""
        return DaughterKernel(density=lambda c, m, s: self(m, s),
                              b0=self.beta0, l=self.l, name=f"dominating:{self.name}",
                              segment_moments=self._segment_moments())

    def _segment_moments(self):
        """Exact per-segment number/mass integrals for the piecewise built-in
        (generic quadrature handles its jumps poorly)."""
        if self.b2 is None:
            return None
        b2 = self.b2

        def seg(lo, hi, s):
            lo = np.minimum(np.asarray(lo, dtype=float), s)
            hi = np.minimum(np.asarray(hi, dtype=float), s)
            b1 = 2.0 * s * (1.0 - b2) + b2
            out_n = np.zeros(np.broadcast_shapes(lo.shape, hi.shape))
            out_m = np.zeros_like(out_n)
            for dens, a, b in ((b1, 0.0, min(1.0, s)), (b2, s - 1.0, s)):
                l2, h2 = np.clip(lo, a, b), np.clip(hi, a, b)
                out_n = out_n + dens * (h2 - l2)
                out_m = out_m + dens * (h2**2 - l2**2) / 2.0
            return out_n, out_m

        return seg

    @classmethod
    def homogeneous(cls, profile: Callable, n0: float, r0: float = 0.0,
                    s0: float = 1.0, name: str = "homogeneous") -> "DominatingKernel":
        return cls(density=lambda m, s: profile(np.clip(m / s, 0.0, 1.0)) / s,
                   beta0=max(n0 / 2.0, 1.0), l=0.0, r0=r0, s0=s0,
                   profile=profile, name=name)

    @classmethod
    def uniform_binary(cls, s0: float = 1.0) -> "DominatingKernel":
        k = cls.homogeneous(lambda z: np.full_like(np.asarray(z, dtype=float), 2.0),
                            n0=2.0, s0=s0, name="uniform-binary")
        return k

    @classmethod
    def erosive_slab(cls, b2: float, s0: float = 2.0) -> "DominatingKernel":
        """Two-population splitting: for parents s >= 2 the daughters sit
        either below mass 1 (density b1(s) = 2s(1-b2) + b2) or within one
        mass unit of the parent (density b2).  Mass conserving; the
        normalized moments tend to b2 as s grows, so the threshold search
        fails whenever b2 >= 1/(2M)."""
        if not 0 <= b2 < 1:
            raise FragflowError("slab height b2 must lie in [0, 1)")

        def dens(m, s):
            m = np.asarray(m, dtype=float)
            s = np.asarray(s, dtype=float)
            b1 = 2.0 * s * (1.0 - b2) + b2
            low = (m >= 0) & (m <= 1.0)
            high = (m >= s - 1.0) & (m <= s)
            return np.where(low, b1, 0.0) + np.where(high, b2, 0.0)

        # n0(s) = b1(s) + b2 = 2s(1-b2) + 2 b2 <= beta0 (1 + s) with
        # beta0 = 2 max(1 - b2, b2)
        beta0 = 2.0 * max(1.0 - b2, b2) if b2 > 0 else 2.0
        return cls(density=dens, beta0=beta0, l=1.0, r0=1.0, s0=max(s0, 2.0),
                   b2=b2, name=f"erosive-slab(b2={b2})")

    def normalized_moment_exact(self, s: float, r: float) -> float | None:
        """Closed form for the built-ins; None when unavailable."""
        if self.profile is not None:
            z = np.linspace(0.0, 1.0, 4097)
            return float(np.trapezoid(self.profile(z) * z**r, z))
        if self.b2 is not None and s >= 2.0:
            b1 = 2.0 * s * (1.0 - self.b2) + self.b2
            return float((b1 / s**r + self.b2 * s * (1.0 - (1.0 - 1.0 / s) ** (r + 1)))
                         / (r + 1))
        return None

    def normalized_moment_limit(self, r: float) -> float | None:
        """lim_{s->inf} of the normalized moment, when known analytically."""
        if self.profile is not None:
            return self.normalized_moment_exact(1.0, r)
        if self.b2 is not None and r > 1:
            return float(self.b2)
        return None


@dataclass
class CoagulationKernel:
    """Symmetric coagulation rate k(x, m, s) <= k0 (1+m^q)(1+s^q)."""

    rate: Callable
    k0: float
    q: float
    x_independent: bool = True
    name: str = "custom"

    def __call__(self, coords, m, s):
        return np.asarray(self.rate(coords, m, s), dtype=float)

    @classmethod
    def constant(cls, k0: float = 1.0) -> "CoagulationKernel":
        return cls(rate=lambda c, m, s: np.broadcast_to(
            np.float64(k0), np.broadcast_shapes(np.shape(m), np.shape(s))).copy(),
            k0=k0, q=0.0, name=f"constant({k0})")

    @classmethod
    def additive(cls, c: float = 1.0) -> "CoagulationKernel":
        """k = c (m + s); grows linearly, outside the product bound for q < 1."""
        return cls(rate=lambda co, m, s: c * (np.asarray(m, dtype=float) + np.asarray(s, dtype=float)),
                   k0=c, q=1.0, name=f"additive({c})")

    @classmethod
    def product_bounded(cls, k0: float, q: float) -> "CoagulationKernel":
        return cls(rate=lambda c, m, s: k0 * (1 + np.asarray(m, dtype=float)**q)
                   * (1 + np.asarray(s, dtype=float)**q),
                   k0=k0, q=q, name=f"product-bounded(k0={k0}, q={q})")

    @classmethod
    def tabulated(cls, m_nodes, values, k0: float, q: float,
                  name: str = "tabulated") -> "CoagulationKernel":
        """Symmetric kernel interpolated from a table k(m_i, m_j)."""
        m_nodes = np.asarray(m_nodes, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.shape != (m_nodes.size, m_nodes.size):
            raise FragflowError("tabulated kernel needs a square table over m_nodes")
        if not np.allclose(values, values.T):
            raise FragflowError("tabulated kernel must be symmetric")
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator((m_nodes, m_nodes), values,
                                         bounds_error=False, fill_value=None)

        def rate(c, m, s):
            m = np.asarray(m, dtype=float)
            s = np.asarray(s, dtype=float)
            mm, ss = np.broadcast_arrays(m, s)
            pts = np.stack([mm.ravel(), ss.ravel()], axis=-1)
            return interp(pts).reshape(mm.shape)

        return cls(rate=rate, k0=k0, q=q, name=name)

    def validate_symmetry(self, m_samples, tol: float = 1e-10) -> None:
        m = np.asarray(m_samples, dtype=float)
        k1 = self(None, m[:, None], m[None, :])
        if not np.allclose(k1, k1.T, atol=tol, rtol=tol):
            raise FragflowError("coagulation kernel is not symmetric")


# ---------------------------------------------------------------------------
# kernel moments and certificates


def moment_n_r(b: DaughterKernel, x, s: float, r: float,
               n_quad: int = 4096) -> tuple[float, float]:
    """r-th daughter moment n_r(x, s) and its deviation N_r = s^r - n_r.

    Composite trapezoid on [0, s]; built-ins with exact segment integrals
    use those for r in {0, 1}.
    """
    if s <= 0:
        raise FragflowError("parent mass s must be positive")
    if r < 0:
        raise FragflowError("moment order r must be nonnegative")
    if b.segment_moments is not None and r in (0.0, 1.0):
        num, mom = b.segment_moments(np.array([0.0]), np.array([s]), s)
        n_r = float(num[0]) if r == 0.0 else float(mom[0])
    else:
        mm = np.linspace(0.0, s, n_quad + 1)
        vals = b(x, mm, s) * mm**r
        n_r = float(np.trapezoid(vals, mm))
    return n_r, s**r - n_r


def normalized_moment(beta: DominatingKernel, s: float, r: float,
                      n_quad: int = 4096) -> float:
    """Normalized moment n_r(s)/s^r, evaluated in the daughter fraction
    variable z = m/s. Homogeneous kernels give an s-independent value."""
    if s <= 0:
        raise FragflowError("parent mass s must be positive")
    exact = beta.normalized_moment_exact(s, r)
    if exact is not None:
        return exact
    z = np.linspace(0.0, 1.0, n_quad + 1)
    return float(np.trapezoid(s * beta(z * s, s) * z**r, z))


def check_mass_conservation(b: DaughterKernel, x_samples, s_samples,
                            tol: float = 1e-6) -> Certificate:
    """Pass iff the daughters of every sampled parent carry the parent mass:
    |n_1(x, s) - s| / s <= tol.  The margin is the worst relative deviation."""
    if tol <= 0:
        raise FragflowError("tolerance must be positive")
    worst, worst_at = 0.0, None
    xs = list(x_samples) if not b.x_independent else [None]
    for x in xs:
        for s in np.atleast_1d(s_samples):
            n1, _ = moment_n_r(b, x, float(s), 1.0)
            dev = abs(n1 - s) / s
            if dev > worst:
                worst, worst_at = dev, {"x": x, "s": float(s), "n1": n1}
    return Certificate(kind="mass-conservation", passed=worst <= tol, margin=worst,
                       evidence={"worst_point": worst_at, "tol": tol,
                                 "samples_used": len(xs) * np.atleast_1d(s_samples).size})


def _refined_unit_tail_grid(eta: float, n: int = 2000, floor: float = 1e-8) -> np.ndarray:
    """Geometric grid on [1-eta, 1] clustered toward z = 1, so thin slabs of
    width ~1/s stay resolved for large parents."""
    depths = eta * np.geomspace(floor, 1.0, n)
    return np.concatenate([1.0 - depths[::-1], [1.0]])


def check_equi_integrability(beta: DominatingKernel, r0: float, s0: float,
                             eta: float, p: float, b1_bound: float,
                             b2_bound: float, s_samples) -> Certificate:
    """Integrability criterion for the rescaled daughter family: for all
    sampled s >= s0 the normalized r0-moment stays below b1_bound and the
    L_p mass of beta near the parent size decays like b2_bound / s."""
    if not 0 < eta <= 1:
        raise FragflowError("eta must lie in (0, 1]")
    if p <= 1:
        raise FragflowError("exponent p must exceed 1")
    worst = np.inf
    worst_at = None
    z_tail = _refined_unit_tail_grid(eta)
    used = 0
    for s in np.atleast_1d(s_samples):
        s = float(s)
        if s < s0:
            continue
        used += 1
        cr0 = normalized_moment(beta, s, r0)
        slack1 = b1_bound - cr0
        vals = beta(z_tail * s, s) ** p
        lp = float(np.trapezoid(vals, z_tail)) ** (1.0 / p)
        slack2 = b2_bound / s - lp
        slack = min(slack1, slack2)
        if slack < worst:
            worst, worst_at = slack, {"s": s, "c_r0": cr0, "lp_tail": lp}
    if used == 0:
        raise FragflowError("no samples at or above s0")
    return Certificate(kind="equi-integrability", passed=worst >= 0, margin=worst,
                       evidence={"worst_point": worst_at, "eta": eta, "p": p,
                                 "b1_bound": b1_bound, "b2_bound": b2_bound,
                                 "samples_used": used})


def find_r1(beta: DominatingKernel, M: float, s_grid, r_max: float,
            threshold: float | None = None, step: float = 0.5) -> Certificate:
    """Search half-integer exponents r > max(l, r0) for the smallest one with

        sup_s [ beta0 (1+s^l)/(1+s^r) + c_r(s) ] < threshold  (default 1/(2M)).

    The sup runs over the sampled parents plus the analytic s -> infinity
    limit when the kernel provides one; the margin is threshold - sup.
    """
    s_grid = np.atleast_1d(np.asarray(s_grid, dtype=float))
    if s_grid.size == 0:
        raise FragflowError("empty parent-mass grid")
    if threshold is None:
        threshold = 1.0 / (2.0 * M)
    r_lo = max(beta.l, beta.r0)
    r_start = np.floor(r_lo / step) * step + step
    history = []
    best = None
    r = r_start
    while r <= r_max + 1e-12:
        sup = -np.inf
        sup_at = None
        for s in s_grid:
            val = beta.beta0 * (1 + s**beta.l) / (1 + s**r) + normalized_moment(beta, float(s), r)
            if val > sup:
                sup, sup_at = val, float(s)
        lim = beta.normalized_moment_limit(r)
        if lim is not None and lim > sup:
            sup, sup_at = lim, np.inf
        margin = threshold - sup
        history.append({"r": float(r), "sup": sup, "margin": margin, "sup_at": sup_at})
        if margin > 0:
            return Certificate(kind="r1-threshold", passed=True, margin=margin,
                               evidence={"r1": float(r), "threshold": threshold,
                                         "history": history})
        if best is None or margin > best["margin"]:
            best = history[-1]
        r += step
    return Certificate(kind="r1-threshold", passed=False, margin=best["margin"],
                       evidence={"r1": None, "threshold": threshold,
                                 "best_r": best["r"], "history": history})


def check_domination(b: DaughterKernel, beta: DominatingKernel, x_samples,
                     m_samples, s_samples, tol: float = 1e-12) -> Certificate:
    """Pass iff b(x, m, s) <= beta(m, s) at all sampled points with daughter
    mass below the parent; the margin is max(b - beta)."""
    worst = -np.inf
    worst_at = None
    xs = list(x_samples) if not b.x_independent else [None]
    m = np.asarray(m_samples, dtype=float)
    count = 0
    for x in xs:
        for s in np.atleast_1d(s_samples):
            sel = m <= s
            if not np.any(sel):
                continue
            gap = b(x, m[sel], float(s)) - beta(m[sel], float(s))
            count += int(sel.sum())
            i = int(np.argmax(gap))
            if gap[i] > worst:
                worst = float(gap[i])
                worst_at = {"x": None if x is None else x, "m": float(m[sel][i]), "s": float(s)}
    return Certificate(kind="domination", passed=worst <= tol, margin=worst,
                       evidence={"worst_point": worst_at, "samples_used": count})
