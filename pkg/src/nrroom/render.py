"""Ray generation, sphere tracing and SDF volume rendering of composed scenes.

Rendering a batch of rays happens in two stages:

1. *planning* (no gradients): per field, cull rays against the field's posed
   box, sphere-trace the field, and place samples either in a narrow band
   around the hit ("safe" mode) or across the whole box interval ("full"
   mode, classic coarse-to-fine);
2. *evaluation* (differentiable): query SDF, normal and albedo at the planned
   distances in each field's local frame, convert consecutive SDF values to
   opacities, merge every field's samples by distance and composite.

Sample distances are constants of the plan, so gradients reach poses, tone
and lighting only through the field queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .fields import DTYPE, count_queries
from .geometry import equirect_dir
from .lighting import S_MIN, irradiance_torch

_BIG = 1e30
# closing safe-mode sample: sigmoid(-10) leaves < 5e-5 transmittance
_TAIL_LOGIT = 10.0
_TAIL_MIN_SLOPE = 0.05


@dataclass
class RenderConfig:
    sharpness: float = 64.0
    coarse_samples: int = 8
    fine_samples: int = 16
    safe_near_offset: float = 0.05
    safe_far_offset: float = 0.1
    full_coarse: int = 64
    full_fine: int = 64
    max_steps: int = 128
    hit_eps: float = 1e-4
    min_step: float = 5e-3
    max_distance: float = 20.0
    near: float = 0.0
    background_color: tuple = (0.0, 0.0, 0.0)
    chunk: int = 4096

    def __post_init__(self):
        counts = (self.coarse_samples, self.fine_samples, self.full_coarse, self.full_fine,
                  self.max_steps)
        if min(counts) < 1:
            raise ValueError("sample counts and max_steps must be >= 1")
        if self.safe_near_offset <= 0 or self.safe_far_offset <= 0:
            raise ValueError("safe-region offsets must be positive")
        if self.sharpness <= 0:
            raise ValueError("sharpness must be positive")


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.dir, dtype=np.float64).reshape(3)
        self.dir = d / np.linalg.norm(d)


@dataclass
class RenderOutput:
    """Per-ray results; ``weights[:, k]`` is the accumulated weight of field k
    (column 0 is the room background)."""

    color: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor
    details: Optional[dict] = None

    @property
    def background_weight(self):
        return self.weights[:, 0]

    @property
    def object_weights(self):
        return self.weights[:, 1:]


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

def equirect_ray(u, v, W, H):
    """Camera-frame unit direction through pixel ``(u, v)`` of a ``W x H``
    panorama (Z up, longitude 0 along +x)."""
    if W != 2 * H:
        raise ValueError("equirectangular images must be 2:1")
    if not (0 <= u < W and 0 <= v < H):
        raise ValueError("pixel outside the image")
    return equirect_dir(u, v, W, H)


def pinhole_dirs(W, H, fov_deg):
    """Camera frame: looking along +x, +y to the left, +z up."""
    f = 0.5 * W / np.tan(np.radians(fov_deg) / 2.0)
    vv, uu = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    d = np.stack([np.full_like(uu, f), W / 2.0 - uu, H / 2.0 - vv], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def camera_rays(camera, W, H):
    """World-space origins and directions for every pixel, ``(H*W, 3)`` each."""
    if camera.model == "equirect":
        vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        d = equirect_dir(uu, vv, W, H)
    else:
        d = pinhole_dirs(W, H, camera.fov_deg)
    d = d.reshape(-1, 3) @ camera.R.T
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


# ---------------------------------------------------------------------------
# Basic pieces
# ---------------------------------------------------------------------------

def alpha_from_sdf(sdf_i, sdf_next, s):
    """Opacity of the interval between consecutive samples.

    ``max((Phi(a) - Phi(b)) / Phi(a), 0)`` with ``Phi`` the logistic sigmoid of
    sharpness ``s``, evaluated in log space for stability.
    """
    if s <= 0:
        raise ValueError("sharpness must be positive")
    a = torch.as_tensor(sdf_i, dtype=DTYPE)
    b = torch.as_tensor(sdf_next, dtype=DTYPE)
    alpha = -torch.expm1(F.logsigmoid(s * b) - F.logsigmoid(s * a))
    alpha = alpha.clamp(min=0.0, max=1.0)
    if alpha.dim() == 0 and not alpha.requires_grad:
        return float(alpha)
    return alpha


def ray_box(origins, dirs, box, near, far):
    """Slab test. Returns ``(t_enter, t_exit, mask)`` clipped to ``[near, far]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(dirs) > 1e-300, 1.0 / np.where(dirs == 0, 1.0, dirs), _BIG)
        t1 = (box.min - origins) * inv
        t2 = (box.max - origins) * inv
    t1 = np.nan_to_num(t1, nan=-_BIG)
    t2 = np.nan_to_num(t2, nan=_BIG)
    tn = np.maximum(np.minimum(t1, t2).max(axis=1), near)
    tf = np.minimum(np.maximum(t1, t2).min(axis=1), far)
    return tn, tf, tf > tn


def _to_local(x, R, p):
    """World points ``(M, 3)`` to a field frame: ``R^T (x - p)``."""
    return (x - p) @ R


def trace_field(fld, R, p, origins, dirs, t_start, t_end, cfg):
    """Sphere-trace a single field along world rays from ``t_start``.

    Returns ``(t_hit, hit_mask)`` as numpy arrays; misses keep their last t.
    """
    R = np.asarray(R, dtype=np.float64)
    o = (np.asarray(origins, dtype=np.float64) - np.asarray(p, dtype=np.float64)) @ R
    d = np.asarray(dirs, dtype=np.float64) @ R
    t = np.array(t_start, dtype=np.float64)
    t_end = np.asarray(t_end, dtype=np.float64)
    hit = np.zeros(len(t), dtype=bool)
    prev_s = np.zeros_like(t)
    prev_step = np.zeros_like(t)
    active = np.arange(len(t))
    for _ in range(cfg.max_steps):
        if active.size == 0:
            break
        s = fld.values(o[active] + t[active, None] * d[active])
        done = s < cfg.hit_eps
        # a floored step may cross the surface: place the hit by a secant step
        over = done & (s < -cfg.hit_eps) & (prev_step[active] > 0)
        if over.any():
            a = active[over]
            frac = prev_s[a] / (prev_s[a] - s[over])
            t[a] -= prev_step[a] * (1.0 - frac)
        hit[active[done]] = True
        go = active[~done]
        step = np.maximum(s[~done], cfg.min_step)
        t[go] += step
        prev_s[go] = s[~done]
        prev_step[go] = step
        active = go[t[go] <= t_end[go]]
    return t, hit


@torch.no_grad()
def sphere_trace(scene, ray, config: RenderConfig, back_offset=0.0):
    """March a single ray through the whole scene (min over every field).

    The march starts ``back_offset`` meters behind the origin; the returned
    distance is measured from the original origin and may be negative.
    Returns ``{"t": float, "object_index": int}`` or ``None`` on a miss.
    """
    from .scene import SceneState

    state = SceneState(scene)
    R, p = state.detached_frames()
    ray = ray if isinstance(ray, Ray) else Ray(*ray)
    start = ray.origin - back_offset * ray.dir
    fields = [(k, f) for k, f in enumerate(state.fields) if f is not None]
    if not fields:
        return None
    t = 0.0
    for _ in range(config.max_steps):
        x = torch.as_tensor(start + t * ray.dir, dtype=DTYPE)[None]
        vals = [float(f.sample(_to_local(x, torch.as_tensor(R[k]), torch.as_tensor(p[k])))[0])
                for k, f in fields]
        i = int(np.argmin(vals))
        if vals[i] < config.hit_eps:
            return {"t": t - back_offset, "object_index": fields[i][0]}
        t += vals[i]
        if t > config.max_distance:
            break
    return None


def _stratified(lo, hi, n):
    """Midpoints of ``n`` equal strata per row, ``(M, n)``."""
    u = (torch.arange(n, dtype=DTYPE) + 0.5) / n
    return lo[:, None] + (hi - lo)[:, None] * u


def _sample_pdf(t, weights, n):
    """Deterministic inverse-CDF resampling of intervals ``[t_i, t_{i+1}]``."""
    w = weights + 1e-5
    pdf = w / w.sum(dim=1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, dim=1)], dim=1)
    cdf[:, -1] = 1.0
    u = ((torch.arange(n, dtype=DTYPE) + 0.5) / n).expand(t.shape[0], n).contiguous()
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, t.shape[1] - 1)
    c0 = torch.gather(cdf, 1, idx - 1)
    c1 = torch.gather(cdf, 1, idx)
    t0 = torch.gather(t, 1, idx - 1)
    t1 = torch.gather(t, 1, idx)
    frac = (u - c0) / (c1 - c0).clamp(min=1e-12)
    return t0 + frac * (t1 - t0)


def _field_alphas(sdf, s):
    """Alphas for consecutive samples of one field; the last sample gets 0."""
    a = -torch.expm1(F.logsigmoid(s * sdf[:, 1:]) - F.logsigmoid(s * sdf[:, :-1]))
    a = a.clamp(min=0.0, max=1.0)
    return torch.cat([a, torch.zeros_like(a[:, :1])], dim=1)


@torch.no_grad()
def _coarse_weights(fld, R, p, o, d, t, s, return_sdf=False):
    x = o[:, None, :] + t[..., None] * d[:, None, :]
    sdf = fld.sample(_to_local(x.reshape(-1, 3), R, p)).reshape(t.shape)
    alpha = _field_alphas(sdf, s)[:, :-1]
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], 1), 1)
    return (trans * alpha, sdf) if return_sdf else trans * alpha


def sample_safe_region(d_surf, config: RenderConfig):
    """Stratified coarse distances in the safe band around ``d_surf``.

    Accepts a scalar or an array; returns sorted coarse distances (the fine
    pass needs field queries and happens inside :func:`plan_field`).
    """
    d = torch.as_tensor(np.atleast_1d(np.asarray(d_surf, dtype=np.float64)))
    lo = (d - config.safe_near_offset).clamp(min=config.near)
    t = _stratified(lo, d + config.safe_far_offset, config.coarse_samples)
    return t.numpy() if np.ndim(d_surf) else t.numpy()[0]


@torch.no_grad()
def plan_field(fld, R, p, origins, dirs, t_near, t_far, config: RenderConfig, mode="safe"):
    """Sorted sample distances ``(M, n)`` for one field along the given rays.

    Safe mode yields ``coarse_samples + fine_samples + 1`` columns; the last
    one closes the band behind the surface.
    """
    R_t, p_t = torch.as_tensor(R), torch.as_tensor(p)
    o = torch.as_tensor(origins, dtype=DTYPE)
    d = torch.as_tensor(dirs, dtype=DTYPE)
    tn = torch.as_tensor(t_near, dtype=DTYPE)
    tf = torch.as_tensor(t_far, dtype=DTYPE)
    s = config.sharpness
    if mode == "full":
        coarse = _stratified(tn, tf, config.full_coarse)
        w = _coarse_weights(fld, R_t, p_t, o, d, coarse, s)
        fine = _sample_pdf(coarse, w, config.full_fine)
        return torch.sort(torch.cat([coarse, fine], 1), dim=1).values
    if mode != "safe":
        raise ValueError(f"unknown render mode {mode!r}")
    n_total = config.coarse_samples + config.fine_samples
    t_hit, hit = trace_field(fld, R, p, origins, dirs, t_near, t_far, config)
    out = _stratified(tn, tf, n_total)  # miss fallback
    tail = tf.clone()
    hit = torch.as_tensor(hit)
    if hit.any():
        dh = torch.as_tensor(t_hit)[hit]
        lo = torch.maximum(dh - config.safe_near_offset, torch.full_like(dh, config.near))
        coarse = _stratified(lo, dh + config.safe_far_offset, config.coarse_samples)
        w, sdf = _coarse_weights(fld, R_t, p_t, o[hit], d[hit], coarse, s, return_sdf=True)
        fine = _sample_pdf(coarse, w, config.fine_samples)
        out[hit] = torch.sort(torch.cat([coarse, fine], 1), dim=1).values
        # a grazing ray is still semi-transparent at the band's far end; one
        # closing sample deep enough behind the surface absorbs the remainder
        slope = (sdf[:, 0] - sdf[:, -1]) / (coarse[:, -1] - coarse[:, 0])
        depth = _TAIL_LOGIT / (s * slope.clamp(min=_TAIL_MIN_SLOPE))
        tail[hit] = torch.minimum(dh + depth.clamp(min=config.safe_far_offset), tf[hit])
    tail = torch.maximum(tail, out[:, -1])
    return torch.cat([out, tail[:, None]], 1)


# ---------------------------------------------------------------------------
# Planning and evaluation for a batch of rays
# ---------------------------------------------------------------------------

@dataclass
class RayPlan:
    """Frozen sample placement: for field k, ``rays[k]`` are ray indices and
    ``t[k]`` the ``(len(rays[k]), n_k)`` sample distances."""

    origins: np.ndarray
    dirs: np.ndarray
    rays: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)
    # k -> (alpha (m, n), color (m, n, 3)) for fields held constant
    baked: dict = field(default_factory=dict)


@torch.no_grad()
def plan_rays(state, origins, dirs, config: RenderConfig, mode="safe", fixed=None):
    """Place samples for every field. ``fixed`` may supply precomputed
    ``{k: (ray_indices, t)}`` for fields whose placement does not change
    (e.g. the static background under a fixed camera)."""
    origins = np.array(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.array(dirs, dtype=np.float64).reshape(-1, 3)
    plan = RayPlan(origins, dirs)
    R, p = state.detached_frames()
    boxes = state.culling_boxes()
    for k, fld in enumerate(state.fields):
        if fld is None:
            continue
        if fixed and k in fixed:
            plan.rays[k], plan.t[k] = fixed[k]
            continue
        if boxes[k] is None:
            tn = np.full(len(origins), config.near)
            tf = np.full(len(origins), config.max_distance)
            idx = np.arange(len(origins))
        else:
            tn, tf, mask = ray_box(origins, dirs, boxes[k], config.near, config.max_distance)
            idx = np.nonzero(mask)[0]
            tn, tf = tn[idx], tf[idx]
        if len(idx) == 0:
            continue
        plan.rays[k] = idx
        plan.t[k] = plan_field(fld, R[k], p[k], origins[idx], dirs[idx], tn, tf, config, mode)
    return plan


def _shade(state, k, x_local, grad, R):
    albedo = state.fields[k].sample_albedo(x_local)
    n_local = grad / torch.linalg.norm(grad, dim=-1, keepdim=True).clamp(min=1e-12)
    n_world = n_local @ R.T
    lit = albedo * irradiance_torch(state.sh, n_world)
    return (lit - state.tone_t[k]) / state.tone_s[k].clamp(min=S_MIN)


def evaluate_plan(state, plan: RayPlan, config: RenderConfig, details=False) -> RenderOutput:
    """Differentiable compositing of a frozen plan."""
    M = len(plan.origins)
    F_ = len(state.fields)
    s = config.sharpness
    bg = torch.as_tensor(config.background_color, dtype=DTYPE)
    keys = sorted(plan.rays)
    if not keys:
        return RenderOutput(bg.expand(M, 3).clone(), torch.zeros(M, dtype=DTYPE),
                            torch.zeros(M, F_, dtype=DTYPE),
                            {"t": torch.zeros(M, 0), "alpha": torch.zeros(M, 0),
                             "trans": torch.zeros(M, 0), "field": torch.zeros(M, 0)}
                            if details else None)
    Rs, ps = state.frames()
    o_all = torch.as_tensor(plan.origins, dtype=DTYPE)
    d_all = torch.as_tensor(plan.dirs, dtype=DTYPE)
    widths = [plan.t[k].shape[1] for k in keys]
    total = sum(widths)
    T_dense = torch.full((M, total), float("inf"), dtype=DTYPE)
    A_dense = torch.zeros((M, total), dtype=DTYPE)
    C_dense = torch.zeros((M, total, 3), dtype=DTYPE)
    K_dense = torch.full((M, total), -1, dtype=torch.long)
    col = 0
    for k, n in zip(keys, widths):
        idx = torch.as_tensor(plan.rays[k], dtype=torch.long)
        t = torch.as_tensor(plan.t[k], dtype=DTYPE)
        if k in plan.baked:
            alpha, color = plan.baked[k]
        else:
            x = o_all[idx, None, :] + t[..., None] * d_all[idx, None, :]
            xl = _to_local(x.reshape(-1, 3), Rs[k], ps[k])
            sdf, grad = state.fields[k].sample(xl, with_grad=True)
            color = _shade(state, k, xl, grad, Rs[k]).reshape(len(idx), n, 3)
            alpha = _field_alphas(sdf.reshape(len(idx), n), s)
        cols = slice(col, col + n)
        T_dense[idx, cols] = t
        A_dense = A_dense.index_put((idx[:, None], torch.arange(col, col + n)[None, :]), alpha)
        C_dense = C_dense.index_put((idx[:, None], torch.arange(col, col + n)[None, :]), color)
        K_dense[idx, cols] = k
        col += n
    # stable sort on a field-ordered layout breaks distance ties by field index
    order = torch.sort(T_dense, dim=1, stable=True).indices
    t_s = torch.gather(T_dense, 1, order)
    a_s = torch.gather(A_dense, 1, order)
    c_s = torch.gather(C_dense, 1, order[..., None].expand(-1, -1, 3))
    k_s = torch.gather(K_dense, 1, order)
    trans = torch.cumprod(torch.cat([torch.ones_like(a_s[:, :1]), 1.0 - a_s], dim=1), dim=1)
    w = trans[:, :-1] * a_s
    color = (w[..., None] * c_s).sum(dim=1) + trans[:, -1:] * bg
    t_fin = torch.where(torch.isfinite(t_s), t_s, torch.zeros_like(t_s))
    depth = (w * t_fin).sum(dim=1)
    onehot = F.one_hot(k_s.clamp(min=0), F_).to(DTYPE) * (k_s >= 0)[..., None]
    weights = (w[..., None] * onehot).sum(dim=1)
    info = None
    if details:
        info = {"t": t_s, "alpha": a_s, "trans": trans[:, :-1], "field": k_s, "weights": w,
                "color": c_s}
    return RenderOutput(color, depth, weights, info)


def render_rays(state, origins, dirs, config: RenderConfig, mode="safe", details=False,
                fixed=None):
    plan = plan_rays(state, origins, dirs, config, mode, fixed)
    return evaluate_plan(state, plan, config, details)


def render_ray(scene, ray, config: RenderConfig, mode="safe") -> RenderOutput:
    from .scene import SceneState

    ray = ray if isinstance(ray, Ray) else Ray(*ray)
    with torch.no_grad():
        return render_rays(SceneState(scene), ray.origin[None], ray.dir[None], config, mode)


@dataclass
class ImageResult:
    color: np.ndarray
    depth: np.ndarray
    weights: np.ndarray
    queries: Optional[int] = None


def render_image(scene, camera, W, H, config: RenderConfig, mode="safe") -> ImageResult:
    """Render ``W x H`` color/depth/weight images; counts queries as a side
    product."""
    from .scene import SceneState

    camera = camera or scene.camera
    o, d = camera_rays(camera, W, H)
    state = SceneState(scene)
    colors, depths, weights = [], [], []
    with count_queries() as qc, torch.no_grad():
        for s in range(0, len(o), config.chunk):
            out = render_rays(state, o[s:s + config.chunk], d[s:s + config.chunk], config, mode)
            colors.append(out.color.numpy())
            depths.append(out.depth.numpy())
            weights.append(out.weights.numpy())
    F_ = state.num_objects + 1
    return ImageResult(np.concatenate(colors).reshape(H, W, 3),
                       np.concatenate(depths).reshape(H, W),
                       np.concatenate(weights).reshape(H, W, F_), qc.total)


def instance_masks(weights, threshold=0.5):
    """Per-pixel field index with the largest weight where it exceeds
    ``threshold``, else 0 (background)."""
    weights = np.asarray(weights)
    return np.where(weights.max(axis=-1) > threshold, weights.argmax(axis=-1), 0)


def query_count(fn, *args, **kwargs):
    """Run ``fn`` and return ``(result, number of field evaluations)``."""
    with count_queries() as qc:
        result = fn(*args, **kwargs)
    return result, qc.total


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
