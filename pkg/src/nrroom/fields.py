"""Signed-distance + albedo fields: dense voxel grids and analytic primitives.

All fields share a small torch-level interface used by the renderer and the
losses:

    field.sample(x, with_grad=False) -> sdf  (and gradient if requested)
    field.sample_albedo(x) -> rgb

``x`` is an ``(M, 3)`` float64 tensor of points in the field's local frame.
Everything stays differentiable with respect to ``x``, including the returned
SDF gradient (needed for shading normals).

The numpy-facing functions (:func:`sdf_eval`, :func:`sdf_grad`, ...) wrap that
interface for single points or point arrays.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import DegenerateGradient, EmptyField, NoAlbedo

DTYPE = torch.float64


# ---------------------------------------------------------------------------
# Query accounting
# ---------------------------------------------------------------------------

class QueryCounter:
    """Tally of field evaluations (one per point per call)."""

    def __init__(self, parent=None):
        self.sdf = 0
        self.albedo = 0
        self.parent = parent
        self._lock = threading.Lock()

    def add(self, sdf=0, albedo=0):
        with self._lock:
            self.sdf += int(sdf)
            self.albedo += int(albedo)
        if self.parent is not None:
            self.parent.add(sdf, albedo)

    @property
    def total(self):
        return self.sdf + self.albedo

    def __repr__(self):
        return f"QueryCounter(sdf={self.sdf}, albedo={self.albedo})"


_active_counter: ContextVar[Optional[QueryCounter]] = ContextVar("nrroom_counter", default=None)


@contextmanager
def count_queries():
    """Count every field evaluation made inside the ``with`` block."""
    counter = QueryCounter(parent=_active_counter.get())
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _tally(sdf=0, albedo=0):
    counter = _active_counter.get()
    if counter is not None:
        counter.add(sdf, albedo)


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self):
        return 0.5 * (self.min + self.max)

    @property
    def extent(self):
        return self.max - self.min

    def corners(self):
        """The 8 corners, shape ``(8, 3)``, x varying fastest."""
        idx = np.array([[(i >> 0) & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)])
        return np.where(idx == 1, self.max, self.min)

    def transformed(self, R, p):
        """Axis-aligned box enclosing this box after ``x -> R x + p``."""
        pts = self.corners() @ np.asarray(R).T + np.asarray(p)
        return Aabb(pts.min(axis=0), pts.max(axis=0))

    def __eq__(self, other):
        return (isinstance(other, Aabb) and np.array_equal(self.min, other.min)
                and np.array_equal(self.max, other.max))

    __hash__ = None


def _as_points(x):
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    return np.atleast_2d(arr).reshape(-1, 3), single, arr.shape[:-1]


# ---------------------------------------------------------------------------
# Grid field
# ---------------------------------------------------------------------------

_CORNERS = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)])


def _outside_value(inner, dist, d2, outside):
    """SDF outside the grid box from the boundary sample ``inner`` and the
    distance ``dist`` to the box.

    Every surface point s lies in the box, and the box is convex, so
    ``|x - s|^2 >= dist^2 + |b - s|^2`` with ``b`` the nearest box point:
    combining in quadrature never overshoots the true distance.
    """
    quad = outside & (inner > 0.0)
    root = torch.sqrt(torch.where(quad, d2 + inner * inner, torch.ones_like(d2)))
    return torch.where(quad, root, inner + dist)


@dataclass(eq=False)
class GridField:
    """Dense SDF (and optional albedo) on a regular node grid.

    ``sdf`` is stored as ``(nz, ny, nx)`` so that C-order flattening gives the
    x-fastest on-disk layout. Node ``(i, j, k)`` sits at
    ``bbox.min + (i, j, k) * spacing``.
    """

    dims: tuple
    bbox: Aabb
    sdf: np.ndarray
    albedo: Optional[np.ndarray] = None
    _t: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError(f"grid dims must be three integers >= 2, got {self.dims}")
        if not np.all(self.bbox.min < self.bbox.max):
            raise ValueError("grid bbox must have positive extent on every axis")
        nx, ny, nz = self.dims
        self.sdf = np.ascontiguousarray(np.asarray(self.sdf, dtype=np.float64).reshape(nz, ny, nx))
        if not np.all(np.isfinite(self.sdf)):
            raise ValueError("grid SDF contains non-finite values")
        if self.albedo is not None:
            alb = np.asarray(self.albedo, dtype=np.float64).reshape(nz, ny, nx, 3)
            if alb.min() < 0.0 or alb.max() > 1.0:
                raise ValueError("albedo components must lie in [0, 1]")
            self.albedo = np.ascontiguousarray(alb)
        self.sdf.setflags(write=False)
        if self.albedo is not None:
            self.albedo.setflags(write=False)
        self._t = {
            "sdf": torch.from_numpy(self.sdf.reshape(-1).copy()),
            "bmin": torch.tensor(self.bbox.min, dtype=DTYPE),
            "bmax": torch.tensor(self.bbox.max, dtype=DTYPE),
            "spacing": torch.tensor(self.spacing, dtype=DTYPE),
            "upper": torch.tensor([d - 1 for d in self.dims], dtype=DTYPE),
            "cell_max": torch.tensor([d - 2 for d in self.dims], dtype=DTYPE),
            "strides": torch.tensor([1, nx, nx * ny], dtype=torch.long),
            "offsets": torch.tensor((_CORNERS * [1, nx, nx * ny]).sum(axis=1), dtype=torch.long),
        }
        if self.albedo is not None:
            self._t["albedo"] = torch.from_numpy(self.albedo.reshape(-1, 3).copy())

    @property
    def spacing(self):
        return (self.bbox.max - self.bbox.min) / (np.array(self.dims) - 1)

    @property
    def voxel_diagonal(self):
        return float(np.linalg.norm(self.spacing))

    @property
    def has_albedo(self):
        return self.albedo is not None

    def node_points(self):
        """World coordinates of every node, shape ``(nz, ny, nx, 3)``."""
        nx, ny, nz = self.dims
        xs = np.linspace(self.bbox.min[0], self.bbox.max[0], nx)
        ys = np.linspace(self.bbox.min[1], self.bbox.max[1], ny)
        zs = np.linspace(self.bbox.min[2], self.bbox.max[2], nz)
        Z, Y, X = np.meshgrid(zs, ys, xs, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def _cell(self, x):
        t = self._t
        g = (x - t["bmin"]) / t["spacing"]
        g = torch.minimum(torch.clamp(g, min=0.0), t["upper"])
        i0 = torch.minimum(torch.floor(g.detach()), t["cell_max"])
        frac = g - i0
        base = (i0.long() * t["strides"]).sum(dim=-1)
        return base[:, None] + t["offsets"], frac

    def sample(self, x, with_grad=False):
        _tally(sdf=x.shape[0])
        t = self._t
        idx, f = self._cell(x)
        c = t["sdf"].take(idx)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        c00 = c[:, 0] * gx + c[:, 1] * fx
        c10 = c[:, 2] * gx + c[:, 3] * fx
        c01 = c[:, 4] * gx + c[:, 5] * fx
        c11 = c[:, 6] * gx + c[:, 7] * fx
        c0 = c00 * gy + c10 * fy
        c1 = c01 * gy + c11 * fy
        value = c0 * gz + c1 * fz

        xc = torch.maximum(torch.minimum(x, t["bmax"]), t["bmin"])
        off = x - xc
        d2 = (off * off).sum(dim=-1)
        outside = d2 > 0.0
        dist = torch.where(outside, torch.sqrt(torch.where(outside, d2, torch.ones_like(d2))),
                           torch.zeros_like(d2))
        inner = value
        value = _outside_value(inner, dist, d2, outside)
        if not with_grad:
            return value

        dx = ((c[:, 1] - c[:, 0]) * gy + (c[:, 3] - c[:, 2]) * fy) * gz \
            + ((c[:, 5] - c[:, 4]) * gy + (c[:, 7] - c[:, 6]) * fy) * fz
        dy = (c10 - c00) * gz + (c11 - c01) * fz
        dz = c1 - c0
        grad = torch.stack([dx, dy, dz], dim=-1) / t["spacing"]
        inside_axis = (x >= t["bmin"]) & (x <= t["bmax"])
        grad = torch.where(inside_axis, grad, torch.zeros_like(grad))
        # d/dx of the outside value: dist has gradient off/dist, the boundary
        # sample only varies along the axes where x is inside the box
        safe = torch.where(outside, dist, torch.ones_like(dist))
        quad = outside & (inner > 0.0)
        denom = torch.where(quad, value, torch.ones_like(value))
        w_in = torch.where(quad, inner / denom, torch.ones_like(inner))
        w_d = torch.where(quad, dist / denom, torch.ones_like(dist))
        grad = w_in[:, None] * grad + torch.where(outside[:, None], w_d[:, None] * off / safe[:, None],
                                                  torch.zeros_like(off))
        return value, grad

    def values(self, x):
        """SDF at an ``(M, 3)`` numpy array, no gradients.

        Same interpolant as :meth:`sample`; numpy keeps the per-call overhead
        low for the small batches of iterative tracing.
        """
        _tally(sdf=x.shape[0])
        if "np" not in self._t:
            nx, ny, _ = self.dims
            self._t["np"] = (self.sdf.reshape(-1), self.bbox.min, self.bbox.max, self.spacing,
                             np.array(self.dims, dtype=np.float64) - 1,
                             np.array(self.dims, dtype=np.float64) - 2,
                             np.array([1, nx, nx * ny]),
                             (_CORNERS * [1, nx, nx * ny]).sum(axis=1))
        flat, bmin, bmax, sp, upper, cell_max, strides, offsets = self._t["np"]
        g = np.minimum(np.maximum((x - bmin) / sp, 0.0), upper)
        i0 = np.minimum(np.floor(g), cell_max)
        f = g - i0
        c = flat[(i0.astype(np.int64) @ strides)[:, None] + offsets]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        c0 = (c[:, 0] * gx + c[:, 1] * fx) * gy + (c[:, 2] * gx + c[:, 3] * fx) * fy
        c1 = (c[:, 4] * gx + c[:, 5] * fx) * gy + (c[:, 6] * gx + c[:, 7] * fx) * fy
        off = x - np.minimum(np.maximum(x, bmin), bmax)
        inner = c0 * gz + c1 * fz
        dist = np.sqrt((off * off).sum(axis=1))
        return np.where(inner > 0.0, np.sqrt(dist * dist + inner * inner), inner + dist)

    def sample_albedo(self, x):
        if self.albedo is None:
            raise NoAlbedo("grid field carries no albedo")
        _tally(albedo=x.shape[0])
        idx, f = self._cell(x)
        c = self._t["albedo"].index_select(0, idx.reshape(-1)).view(-1, 8, 3)
        fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        c00 = c[:, 0] * gx + c[:, 1] * fx
        c10 = c[:, 2] * gx + c[:, 3] * fx
        c01 = c[:, 4] * gx + c[:, 5] * fx
        c11 = c[:, 6] * gx + c[:, 7] * fx
        out = (c00 * gy + c10 * fy) * gz + (c01 * gy + c11 * fy) * fz
        return out.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Analytic primitives
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class AnalyticField:
    """Exact SDF of a sphere, a box, or a room shell (inverted box).

    For ``room_shell`` the inside of the box is free space (positive) and the
    surrounding solid is negative, so the walls are the zero level set.
    """

    kind: str
    center: np.ndarray
    radius: float = 0.0
    half_extents: Optional[np.ndarray] = None
    albedo: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.kind == "sphere":
            if not self.radius > 0:
                raise ValueError("sphere radius must be positive")
        elif self.kind in ("box", "room_shell"):
            self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
            if np.any(self.half_extents <= 0):
                raise ValueError("box half extents must be positive")
        else:
            raise ValueError(f"unknown analytic kind {self.kind!r}")
        if self.albedo is not None:
            self.albedo = np.clip(np.asarray(self.albedo, dtype=np.float64).reshape(3), 0.0, 1.0)
        self._c = torch.tensor(self.center, dtype=DTYPE)
        if self.half_extents is not None:
            self._h = torch.tensor(self.half_extents, dtype=DTYPE)

    @classmethod
    def sphere(cls, center, radius, albedo=None):
        return cls("sphere", center, radius=float(radius), albedo=albedo)

    @classmethod
    def box(cls, center, half_extents, albedo=None):
        return cls("box", center, half_extents=half_extents, albedo=albedo)

    @classmethod
    def room_shell(cls, center, half_extents, albedo=None):
        return cls("room_shell", center, half_extents=half_extents, albedo=albedo)

    @property
    def has_albedo(self):
        return self.albedo is not None

    @property
    def bbox(self):
        if self.kind == "sphere":
            return Aabb(self.center - self.radius, self.center + self.radius)
        if self.kind == "box":
            return Aabb(self.center - self.half_extents, self.center + self.half_extents)
        return None  # room shell solid is unbounded

    def _box(self, x, with_grad):
        rel = x - self._c
        q = rel.abs() - self._h
        qpos = q.clamp(min=0.0)
        n2 = (qpos * qpos).sum(dim=-1)
        outside = n2 > 0.0
        n = torch.sqrt(torch.where(outside, n2, torch.ones_like(n2)))
        qmax, arg = q.max(dim=-1)
        value = torch.where(outside, n, qmax)
        if not with_grad:
            return value
        sign = torch.where(rel >= 0, 1.0, -1.0).to(x.dtype)
        g_out = sign * qpos / n[:, None]
        g_in = sign * torch.nn.functional.one_hot(arg, 3).to(x.dtype)
        return value, torch.where(outside[:, None], g_out, g_in)

    def sample(self, x, with_grad=False):
        _tally(sdf=x.shape[0])
        if self.kind == "sphere":
            rel = x - self._c
            r = torch.sqrt((rel * rel).sum(dim=-1))
            value = r - self.radius
            if not with_grad:
                return value
            return value, rel / r.clamp(min=1e-300)[:, None]
        out = self._box(x, with_grad)
        if self.kind == "box":
            return out
        if not with_grad:
            return -out
        return -out[0], -out[1]

    def values(self, x):
        with torch.no_grad():
            return self.sample(torch.from_numpy(np.asarray(x, dtype=np.float64))).numpy()

    def sample_albedo(self, x):
        if self.albedo is None:
            raise NoAlbedo(f"analytic {self.kind} has no albedo")
        _tally(albedo=x.shape[0])
        return torch.as_tensor(self.albedo, dtype=DTYPE).expand(x.shape[0], 3).clone()


# ---------------------------------------------------------------------------
# Point-wise numpy API
# ---------------------------------------------------------------------------

def _eval(field, x, with_grad):
    pts, single, shape = _as_points(x)
    with torch.no_grad():
        out = field.sample(torch.from_numpy(pts), with_grad=with_grad)
    return out, single, shape


def sdf_eval(field, x):
    """Signed distance at ``x`` (a 3-vector or ``(..., 3)`` array), meters."""
    val, single, shape = _eval(field, x, False)
    val = val.numpy()
    return float(val[0]) if single else val.reshape(shape)


def sdf_grad(field, x):
    """Gradient of the field's SDF at ``x``.

    For grids this is the gradient of the trilinear interpolant, which is
    discontinuous across cell faces.
    """
    (_, grad), single, shape = _eval(field, x, True)
    grad = grad.numpy()
    return grad[0] if single else grad.reshape(*shape, 3)


def normal(field, x):
    g = np.asarray(sdf_grad(field, x))
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise DegenerateGradient("SDF gradient vanishes (medial-axis query)")
    return g / norm


def albedo_eval(field, x):
    pts, single, shape = _as_points(x)
    if not field.has_albedo:
        raise NoAlbedo("field carries no albedo")
    with torch.no_grad():
        rgb = field.sample_albedo(torch.from_numpy(pts)).numpy()
    return rgb[0] if single else rgb.reshape(*shape, 3)


def bake_grid(analytic: AnalyticField, dims, bbox: Aabb,
              albedo_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> GridField:
    """Sample ``analytic`` at the nodes of a ``dims`` grid spanning ``bbox``.

    ``albedo_fn`` maps an ``(n, 3)`` array of node positions to ``(n, 3)``
    RGB; when omitted the primitive's constant albedo is used, if any.
    """
    dims = tuple(int(d) for d in dims)
    nx, ny, nz = dims
    proto = GridField(dims, bbox, np.zeros((nz, ny, nx)))
    nodes = proto.node_points().reshape(-1, 3)
    sdf = np.empty(len(nodes))
    chunk = 1 << 20
    with torch.no_grad():
        for s in range(0, len(nodes), chunk):
            sdf[s:s + chunk] = analytic.sample(torch.from_numpy(nodes[s:s + chunk])).numpy()
    albedo = None
    if albedo_fn is not None:
        albedo = np.clip(np.asarray(albedo_fn(nodes), dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    elif analytic.albedo is not None:
        albedo = np.broadcast_to(analytic.albedo, (len(nodes), 3))
    return GridField(dims, bbox, sdf.reshape(nz, ny, nx),
                     None if albedo is None else albedo.reshape(nz, ny, nx, 3))


def extract_bbox(field: GridField) -> Aabb:
    """Tight box over all nodes with negative SDF, padded by one voxel."""
    if "tight_bbox" in field._t:
        return field._t["tight_bbox"]
    inside = field.sdf < 0.0
    if not inside.any():
        raise EmptyField("no voxel has negative SDF")
    kk, jj, ii = np.nonzero(inside)
    lo = np.array([ii.min(), jj.min(), kk.min()], dtype=np.float64)
    hi = np.array([ii.max(), jj.max(), kk.max()], dtype=np.float64)
    sp = field.spacing
    box = Aabb(field.bbox.min + (lo - 1) * sp, field.bbox.min + (hi + 1) * sp)
    field._t["tight_bbox"] = box
    return box

