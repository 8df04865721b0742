"""Named built-ins for scenario configs: kernels, coefficient fields, and
initial data, each with a small parameter schema used by the CLI catalog."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .grids import MassGrid, SpatialGrid, StateField
from .kernels import AbsorptionRate, CoagulationKernel, DaughterKernel, DominatingKernel
from .transport import DiffusionCoefficient, VelocityField

__all__ = [
    "build_absorption",
    "build_daughter",
    "build_dominating",
    "build_coagulation",
    "build_velocity",
    "build_diffusion",
    "build_initial",
    "catalog_data",
]


ABSORPTION = {
    "zero": {"params": {}, "doc": "no absorption"},
    "constant": {"params": {"c": 1.0}, "doc": "a = c"},
    "linear": {"params": {}, "doc": "a = m"},
    "power-law": {"params": {"a0": 1.0, "gamma": 1.0, "m0": 1.0}, "doc": "a = a0 m^gamma"},
    "modulated": {"params": {"lo": 0.5, "hi": 1.5, "a0": 1.0, "gamma": 1.0},
                  "doc": "a = g(x) a0 m^gamma with g = 1 + eps sin(x1), g in [lo, hi]"},
}

DAUGHTER = {
    "uniform-binary": {"params": {}, "doc": "b = 2/s, two uniform daughters"},
    "homogeneous-power": {"params": {"nu": 0.0}, "doc": "b = (nu+2) m^nu / s^(nu+1)"},
    "erosive-slab": {"params": {"b2": 0.5}, "doc": "daughters near 0 and near the parent"},
}

DOMINATING = {
    "uniform-binary": {"params": {"s0": 1.0}, "doc": "beta = 2/s"},
    "homogeneous-constant": {"params": {"height": 2.0, "s0": 1.0},
                             "doc": "beta = h/s with constant profile"},
    "erosive-slab": {"params": {"b2": 0.5, "s0": 2.0},
                     "doc": "two-population kernel; normalized moments tend to b2"},
}

COAGULATION = {
    "constant": {"params": {"k0": 1.0}, "doc": "k = k0"},
    "additive": {"params": {"c": 1.0}, "doc": "k = c (m + s); outside the product bound for q < 1"},
    "product-bounded": {"params": {"k0": 1.0, "q": 0.5}, "doc": "k = k0 (1+m^q)(1+s^q)"},
}

VELOCITY = {
    "none": {"params": {}, "doc": "no advection"},
    "constant": {"params": {"velocity": [1.0]}, "doc": "uniform drift"},
    "rotation": {"params": {"rate": 1.0}, "doc": "rigid rotation (2D)"},
    "shear": {"params": {"rate": 1.0}, "doc": "simple shear (2D)"},
    "linear": {"params": {"kappa": 1.0, "dim": 1},
               "doc": "omega = kappa x; flow diagnostics only (not divergence free)"},
}

DIFFUSION = {
    "none": {"params": {}, "doc": "no diffusion"},
    "constant": {"params": {"d0": 1.0}, "doc": "d = d0"},
    "power-law": {"params": {"d0": 1.0, "p": 1.0}, "doc": "d = d0 (1+m)^-p"},
    "tabulated": {"params": {"m_nodes": [0.0, 1.0], "values": [1.0, 1.0]},
                  "doc": "d(m) interpolated from a table"},
}

INITIAL_MASS = {
    "exponential": {"params": {"scale": 1.0}, "doc": "scale * exp(-m)"},
    "power-tail": {"params": {"exponent": 3.5, "scale": 1.0}, "doc": "scale (1+m)^-exponent"},
    "gaussian": {"params": {"center": 2.0, "width": 0.5, "scale": 1.0},
                 "doc": "scale exp(-((m-center)/width)^2)"},
}

INITIAL_SPACE = {
    "uniform": {"params": {}, "doc": "constant profile"},
    "gaussian": {"params": {"center": [0.0], "sigma": 0.2},
                 "doc": "exp(-|x-center|^2 / (2 sigma^2))"},
}


def _take(spec: dict, params: dict, name: str) -> dict:
    out = dict(spec["params"])
    unknown = set(params) - set(out)
    if unknown:
        raise ConfigError(f"unknown parameters {sorted(unknown)} for builtin {name!r}")
    out.update(params)
    return out


def build_absorption(kind: str, **params) -> AbsorptionRate:
    if kind not in ABSORPTION:
        raise ConfigError(f"unknown absorption rate {kind!r}")
    p = _take(ABSORPTION[kind], params, kind)
    if kind == "zero":
        return AbsorptionRate.zero()
    if kind == "constant":
        return AbsorptionRate.constant(p["c"])
    if kind == "linear":
        return AbsorptionRate.linear()
    if kind == "power-law":
        return AbsorptionRate.power_law(p["a0"], p["gamma"], p["m0"])
    base = AbsorptionRate.power_law(p["a0"], p["gamma"])
    lo, hi = p["lo"], p["hi"]
    eps = (hi - lo) / (hi + lo)
    mid = (hi + lo) / 2.0
    return AbsorptionRate.modulated(base, lambda c: mid * (1 + eps * np.sin(c[0])), lo, hi)


def build_daughter(kind: str, **params) -> DaughterKernel:
    if kind not in DAUGHTER:
        raise ConfigError(f"unknown daughter kernel {kind!r}")
    p = _take(DAUGHTER[kind], params, kind)
    if kind == "uniform-binary":
        return DaughterKernel.uniform_binary()
    if kind == "homogeneous-power":
        return DaughterKernel.power_law(p["nu"])
    return DominatingKernel.erosive_slab(p["b2"]).as_daughter()


def build_dominating(kind: str, **params) -> DominatingKernel:
    if kind not in DOMINATING:
        raise ConfigError(f"unknown dominating kernel {kind!r}")
    p = _take(DOMINATING[kind], params, kind)
    if kind == "uniform-binary":
        return DominatingKernel.uniform_binary(s0=p["s0"])
    if kind == "homogeneous-constant":
        h = float(p["height"])
        return DominatingKernel.homogeneous(
            lambda z: np.full_like(np.asarray(z, dtype=float), h), n0=h, s0=p["s0"],
            name=f"homogeneous-constant({h})")
    return DominatingKernel.erosive_slab(p["b2"], s0=p["s0"])


def build_coagulation(kind: str, **params) -> CoagulationKernel:
    if kind not in COAGULATION:
        raise ConfigError(f"unknown coagulation kernel {kind!r}")
    p = _take(COAGULATION[kind], params, kind)
    if kind == "constant":
        return CoagulationKernel.constant(p["k0"])
    if kind == "additive":
        return CoagulationKernel.additive(p["c"])
    return CoagulationKernel.product_bounded(p["k0"], p["q"])


def build_velocity(kind: str, **params) -> VelocityField | None:
    if kind not in VELOCITY:
        raise ConfigError(f"unknown velocity field {kind!r}")
    p = _take(VELOCITY[kind], params, kind)
    if kind == "none":
        return None
    if kind == "constant":
        return VelocityField.constant(p["velocity"])
    if kind == "rotation":
        return VelocityField.rotation(p["rate"])
    if kind == "shear":
        return VelocityField.shear(p["rate"])
    return VelocityField.linear(p["kappa"], dim=int(p["dim"]))


def build_diffusion(kind: str, **params) -> DiffusionCoefficient | None:
    if kind not in DIFFUSION:
        raise ConfigError(f"unknown diffusion coefficient {kind!r}")
    p = _take(DIFFUSION[kind], params, kind)
    if kind == "none":
        return None
    if kind == "constant":
        return DiffusionCoefficient.constant(p["d0"])
    if kind == "power-law":
        return DiffusionCoefficient.power_law(p["d0"], p["p"])
    return DiffusionCoefficient.tabulated(p["m_nodes"], p["values"])


def build_initial(space: SpatialGrid, mass: MassGrid, mass_spec: dict,
                  space_spec: dict, norm_mode: str = "integral") -> StateField:
    mkind = mass_spec.get("kind", "exponential")
    skind = space_spec.get("kind", "uniform")
    if mkind not in INITIAL_MASS:
        raise ConfigError(f"unknown initial mass profile {mkind!r}")
    if skind not in INITIAL_SPACE:
        raise ConfigError(f"unknown initial space profile {skind!r}")
    mp = _take(INITIAL_MASS[mkind], {k: v for k, v in mass_spec.items() if k != "kind"}, mkind)
    sp = _take(INITIAL_SPACE[skind], {k: v for k, v in space_spec.items() if k != "kind"}, skind)

    if mkind == "exponential":
        fm = lambda m: mp["scale"] * np.exp(-m)
    elif mkind == "power-tail":
        fm = lambda m: mp["scale"] * (1 + m) ** (-mp["exponent"])
    else:
        fm = lambda m: mp["scale"] * np.exp(-((m - mp["center"]) / mp["width"]) ** 2)

    if skind == "uniform":
        fs = lambda *coords: np.ones_like(coords[0])
    else:
        center = np.atleast_1d(np.asarray(sp["center"], dtype=float))
        sig = sp["sigma"]

        def fs(*coords):
            d2 = sum((c - center[i]) ** 2 for i, c in enumerate(coords))
            return np.exp(-d2 / (2 * sig**2))

    def fn(*args):
        coords, m = args[:-1], args[-1]
        return fs(*coords) * fm(m)

    return StateField.from_function(space, mass, fn, norm_mode=norm_mode)


def catalog_data() -> dict:
    return {
        "absorption": ABSORPTION,
        "daughter": DAUGHTER,
        "dominating": DOMINATING,
        "coagulation": COAGULATION,
        "velocity": VELOCITY,
        "diffusion": DIFFUSION,
        "initial_mass": INITIAL_MASS,
        "initial_space": INITIAL_SPACE,
    }
