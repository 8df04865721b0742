"""Mass and space discretizations, state fields, weighted norms and moments.

The mass half-line (0, m_max] is covered by cell-centered bins (uniform or
geometric widths); densities are sampled at cell centers and integrated with
the cell widths, so the quadrature weights are positive and the rule is
second order.  Space is a node-based box grid (1D or 2D) integrated with
composite trapezoid weights, which double as the finite-volume cell volumes
of the diffusion discretization.

Norms follow the two working spaces: ``integral`` mode integrates |u| over
space before the mass integral, ``sup`` mode takes the spatial maximum.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import GridError

__all__ = [
    "MassGrid",
    "SpatialGrid",
    "StateField",
    "weighted_norm",
    "weighted_norm_mu",
    "moment",
    "classical_moment",
    "write_field_csv",
    "write_field_binary",
    "read_field_binary",
]

_BINARY_MAGIC = b"TFCF"
_BINARY_VERSION = 1


@dataclass(frozen=True)
class MassGrid:
    """Cell-centered discretization of the mass interval (0, m_max]."""

    m_max: float
    centers: np.ndarray
    widths: np.ndarray
    spacing: str  # "uniform" | "geometric"

    def __post_init__(self):
        c, w = np.asarray(self.centers), np.asarray(self.widths)
        if c.ndim != 1 or c.size < 1 or c.size != w.size:
            raise GridError("mass grid needs >= 1 cell with matching widths")
        if not np.all(np.diff(c) > 0):
            raise GridError("mass cell centers must be strictly increasing")
        if not np.all(w > 0):
            raise GridError("mass cell widths must be positive")
        if abs(w.sum() - self.m_max) > 1e-9 * self.m_max:
            raise GridError("mass cells must cover (0, m_max]")
        if self.spacing == "uniform" and not np.allclose(w, w[0], rtol=1e-12):
            raise GridError("uniform spacing requires constant cell widths")

    @classmethod
    def uniform(cls, n: int, m_max: float) -> "MassGrid":
        dm = m_max / n
        centers = (np.arange(n) + 0.5) * dm
        return cls(m_max=m_max, centers=centers, widths=np.full(n, dm), spacing="uniform")

    @classmethod
    def geometric(cls, n: int, m_max: float, ratio: float) -> "MassGrid":
        """Cell widths grow by ``ratio`` per cell; the first cells resolve the
        small-mass end where fragmentation cascades accumulate."""
        if ratio <= 1.0:
            raise GridError("geometric ratio must exceed 1")
        w0 = m_max * (ratio - 1.0) / (ratio**n - 1.0)
        widths = w0 * ratio ** np.arange(n)
        edges = np.concatenate([[0.0], np.cumsum(widths)])
        edges[-1] = m_max
        centers = 0.5 * (edges[:-1] + edges[1:])
        return cls(m_max=m_max, centers=centers, widths=np.diff(edges), spacing="geometric")

    @property
    def n(self) -> int:
        return self.centers.size

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.widths)])

    def descriptor(self) -> dict:
        d = {"kind": "mass", "spacing": self.spacing, "n": int(self.n), "m_max": float(self.m_max)}
        if self.spacing == "geometric":
            d["ratio"] = float(self.widths[1] / self.widths[0])
        return d


@dataclass(frozen=True)
class SpatialGrid:
    """Node-based box grid for the spatial domain (1D or 2D)."""

    bounds: tuple  # ((lo, hi), ...) per axis
    shape: tuple   # nodes per axis
    boundary: str = "whole-space-truncated"  # | "bounded-neumann"

    def __post_init__(self):
        if len(self.bounds) != len(self.shape) or len(self.shape) not in (1, 2):
            raise GridError("spatial grid must be 1D or 2D with bounds per axis")
        for (lo, hi), n in zip(self.bounds, self.shape):
            if n < 2:
                raise GridError("need at least 2 nodes per axis")
            if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
                raise GridError("axis bounds must be finite with hi > lo")
        if self.boundary not in ("whole-space-truncated", "bounded-neumann"):
            raise GridError(f"unknown boundary treatment {self.boundary!r}")

    @classmethod
    def line(cls, n: int, lo: float, hi: float, boundary: str = "whole-space-truncated") -> "SpatialGrid":
        return cls(bounds=((lo, hi),), shape=(n,), boundary=boundary)

    @classmethod
    def box(cls, n: int, lo: float, hi: float, boundary: str = "whole-space-truncated") -> "SpatialGrid":
        return cls(bounds=((lo, hi), (lo, hi)), shape=(n, n), boundary=boundary)

    @property
    def dim(self) -> int:
        return len(self.shape)

    def axes(self) -> list:
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.shape)]

    def spacings(self) -> list:
        return [(hi - lo) / (n - 1) for (lo, hi), n in zip(self.bounds, self.shape)]

    def meshgrid(self) -> list:
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def trapezoid_weights(self) -> np.ndarray:
        """Tensor-product trapezoid weights; also the FV node volumes."""
        ws = []
        for (lo, hi), n in zip(self.bounds, self.shape):
            h = (hi - lo) / (n - 1)
            w = np.full(n, h)
            w[0] = w[-1] = h / 2
            ws.append(w)
        if self.dim == 1:
            return ws[0]
        return np.multiply.outer(ws[0], ws[1])

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))

    def descriptor(self) -> dict:
        return {
            "kind": "space",
            "dim": self.dim,
            "bounds": [list(b) for b in self.bounds],
            "shape": list(self.shape),
            "boundary": self.boundary,
        }


@dataclass
class StateField:
    """Density u(x, m) sampled on a space x mass grid.

    ``values`` has shape ``space.shape + (mass.n,)``.  ``norm_mode`` selects
    the working space: "integral" integrates over x, "sup" takes the spatial
    maximum.
    """

    space: SpatialGrid
    mass: MassGrid
    values: np.ndarray
    norm_mode: str = "integral"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = tuple(self.space.shape) + (self.mass.n,)
        if self.values.shape != expected:
            raise GridError(f"field shape {self.values.shape} != grid shape {expected}")
        if self.norm_mode not in ("integral", "sup"):
            raise GridError(f"unknown norm mode {self.norm_mode!r}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("field values must be finite")

    @classmethod
    def from_function(cls, space: SpatialGrid, mass: MassGrid,
                      fn: Callable, norm_mode: str = "integral") -> "StateField":
        """Sample ``fn(*coords, m)`` on the grid (arrays broadcast)."""
        mesh = space.meshgrid()
        m = mass.centers
        args = [g[..., None] for g in mesh] + [m[(None,) * space.dim + (slice(None),)]]
        vals = np.broadcast_to(fn(*args), tuple(space.shape) + (mass.n,)).astype(float)
        return cls(space=space, mass=mass, values=vals.copy(), norm_mode=norm_mode)

    @classmethod
    def zeros(cls, space: SpatialGrid, mass: MassGrid, norm_mode: str = "integral") -> "StateField":
        return cls(space=space, mass=mass,
                   values=np.zeros(tuple(space.shape) + (mass.n,)), norm_mode=norm_mode)

    def copy(self, values: np.ndarray | None = None) -> "StateField":
        return replace(self, values=self.values.copy() if values is None else values)

    def same_grids(self, other: "StateField") -> bool:
        return (self.space == other.space and self.mass.descriptor() == other.mass.descriptor())

    def x_norms(self) -> np.ndarray:
        """Per-mass-cell spatial norm ||u(., m)||, as an array over m."""
        a = np.abs(self.values)
        if self.norm_mode == "sup":
            return a.max(axis=tuple(range(self.space.dim)))
        wx = self.space.trapezoid_weights()
        return np.tensordot(wx, a, axes=(list(range(self.space.dim)),
                                         list(range(self.space.dim))))

    def is_nonnegative(self, tol: float = 0.0) -> bool:
        return bool(self.values.min() >= -tol)


def _check_weight_exponent(r: float):
    if r < 0:
        raise GridError("weight exponent r must be nonnegative")


def weighted_norm(u: StateField, r: float) -> float:
    """Norm of the weighted space: integral over m of ||u(., m)|| (1 + m^r) dm."""
    _check_weight_exponent(r)
    m, w = u.mass.centers, u.mass.widths
    return float(np.sum(u.x_norms() * (1.0 + m**r) * w))


def weighted_norm_mu(u: StateField, r: float, mu: float, omega: float,
                     alpha1: Callable) -> float:
    """Interpolation-space norm with the extra factor (omega + alpha1(m))^mu.

    mu = 0 reproduces :func:`weighted_norm` exactly (same quadrature nodes).
    """
    _check_weight_exponent(r)
    if not 0.0 <= mu <= 1.0:
        raise GridError("interpolation exponent mu must lie in [0, 1]")
    if omega <= 0:
        raise GridError("shift omega must be positive")
    m, w = u.mass.centers, u.mass.widths
    fac = (omega + np.asarray(alpha1(m), dtype=float)) ** mu
    return float(np.sum(u.x_norms() * fac * (1.0 + m**r) * w))


def moment(u: StateField, r: float) -> float:
    """Signed moment with the (1 + m^r) weight, integrated over space and mass.

    Equals :func:`weighted_norm` for nonnegative fields.  Only defined in
    integral mode; the sup-mode spaces have no L1 moments.
    """
    _check_weight_exponent(r)
    if u.norm_mode != "integral":
        raise GridError("moments are defined in integral norm mode only")
    m, w = u.mass.centers, u.mass.widths
    wx = u.space.trapezoid_weights()
    per_m = np.tensordot(wx, u.values, axes=(list(range(u.space.dim)),
                                             list(range(u.space.dim))))
    return float(np.sum(per_m * (1.0 + m**r) * w))


def classical_moment(u: StateField, r: float) -> float:
    """Plain moment with weight m^r: r=0 counts particles, r=1 is the mass.

    The (1+m^r)-weighted moment of :func:`moment` relates to these by
    moment(u, r) = classical_moment(u, 0) + classical_moment(u, r); the
    conservation ledgers use the classical pair (number, mass).
    """
    _check_weight_exponent(r)
    if u.norm_mode != "integral":
        raise GridError("moments are defined in integral norm mode only")
    m, w = u.mass.centers, u.mass.widths
    wx = u.space.trapezoid_weights()
    per_m = np.tensordot(wx, u.values, axes=(list(range(u.space.dim)),
                                             list(range(u.space.dim))))
    return float(np.sum(per_m * m**r * w))


def write_field_csv(u: StateField, path) -> None:
    """Plain CSV dump: one row per (x, m) sample."""
    mesh = u.space.meshgrid()
    m = u.mass.centers
    cols = [np.broadcast_to(g[..., None], u.values.shape).ravel() for g in mesh]
    cols.append(np.broadcast_to(m, u.values.shape).ravel())
    cols.append(u.values.ravel())
    header = (["x"] if u.space.dim == 1 else ["x1", "x2"]) + ["m", "u"]
    data = np.column_stack(cols)
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="")


def write_field_binary(u: StateField, path) -> None:
    """Compact dump: magic, version, spatial dim, axis counts, n_m, dtype tag,
    then the row-major float64 values."""
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<II", _BINARY_VERSION, u.space.dim))
        for n in u.space.shape:
            fh.write(struct.pack("<I", n))
        fh.write(struct.pack("<I", u.mass.n))
        fh.write(b"<f8\x00")
        fh.write(np.ascontiguousarray(u.values, dtype="<f8").tobytes())


def write_matrix_binary(matrix: np.ndarray, path) -> None:
    """Dump a dense matrix (e.g. a gain table) in the field format: the rows
    play the role of the single spatial axis."""
    mat = np.ascontiguousarray(matrix, dtype="<f8")
    if mat.ndim != 2:
        raise GridError("matrix dump expects a 2D array")
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<II", _BINARY_VERSION, 1))
        fh.write(struct.pack("<I", mat.shape[0]))
        fh.write(struct.pack("<I", mat.shape[1]))
        fh.write(b"<f8\x00")
        fh.write(mat.tobytes())


def read_field_binary(path) -> tuple:
    """Read a binary field dump; returns (values, meta dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _BINARY_MAGIC:
            raise GridError("not a field dump (bad magic)")
        version, dim = struct.unpack("<II", fh.read(8))
        if version != _BINARY_VERSION:
            raise GridError(f"unsupported field dump version {version}")
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(dim))
        n_m = struct.unpack("<I", fh.read(4))[0]
        tag = fh.read(4).rstrip(b"\x00").decode()
        values = np.frombuffer(fh.read(), dtype=tag).reshape(shape + (n_m,))
    return values, {"dim": dim, "shape": shape, "n_m": n_m, "dtype": tag}


def grids_to_json(space: SpatialGrid, mass: MassGrid) -> str:
    return json.dumps({"space": space.descriptor(), "mass": mass.descriptor()}, indent=2)
