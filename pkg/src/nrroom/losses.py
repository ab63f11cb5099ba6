"""Loss terms of the holistic objective.

Every loss is a differentiable torch scalar of a :class:`SceneState`.
Discrete decisions (sample placement, probe hits, neighbor sets) are made
without gradients and can be frozen in a plan object, so a central
finite-difference check of the same plan measures exactly the gradient the
optimizer sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from .fields import DTYPE
from .geometry import equirect_angles
from .relations import nearest_neighbors, probe
from .render import RayPlan, RenderConfig, camera_rays, evaluate_plan, plan_rays, trace_field

# ---------------------------------------------------------------------------
# Ray sampling
# ---------------------------------------------------------------------------


def dilate_masks(masks, kernel=5):
    fg = np.asarray(masks) > 0
    if kernel <= 1:
        return fg
    return binary_dilation(fg, structure=np.ones((kernel, kernel), dtype=bool))


def sample_rays(masks, W, H, N, rng, background_fraction=0.2, kernel=5):
    """Flat pixel indices: ``N`` on dilated object masks, ``background_fraction
    * N`` elsewhere, without replacement and weighted by cos(latitude)."""
    masks = np.asarray(masks).reshape(H, W)
    fg = dilate_masks(masks, kernel).reshape(-1)
    _, theta = equirect_angles(0, np.arange(H), W, H)
    w = np.repeat(np.cos(theta)[:, None], W, axis=1).reshape(-1)
    picks = []
    for sel, n in ((fg, N), (~fg, int(round(background_fraction * N)))):
        idx = np.nonzero(sel)[0]
        if len(idx) == 0 or n == 0:
            continue
        p = w[idx] / w[idx].sum()
        picks.append(np.sort(rng.choice(idx, size=min(n, len(idx)), replace=False, p=p)))
    return np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# Photometric
# ---------------------------------------------------------------------------

@dataclass
class PhotometricPlan:
    pixels: np.ndarray
    plan: object
    target: torch.Tensor


class PixelRays:
    """Camera rays for every pixel of the observed panorama, plus caches for
    the static background: its sample placement and, while its appearance
    parameters are frozen, its per-sample alphas and colors."""

    def __init__(self, camera, W, H):
        self.W, self.H = W, H
        self.origins, self.dirs = camera_rays(camera, W, H)
        self._bg = {}
        self._baked = None

    @staticmethod
    def _key(config, mode):
        return (mode, config.sharpness, config.coarse_samples, config.fine_samples,
                config.full_coarse, config.full_fine, config.safe_near_offset,
                config.safe_far_offset)

    def background_plan(self, state, config: RenderConfig, mode):
        key = self._key(config, mode)
        if key not in self._bg and state.fields[0] is not None:
            from .scene import Scene, SceneState
            sc = state.scene
            bare = SceneState(Scene(sc.background, [], sc.lighting, sc.camera))
            plan = plan_rays(bare, self.origins, self.dirs, config, mode)
            self._bg[key] = plan.t.get(0)
        return self._bg.get(key)

    def background_baked(self, state, config: RenderConfig, mode):
        """``(alpha, color)`` of the background samples for every pixel, or
        ``None`` when the background appearance is being optimized."""
        if any(t.requires_grad for t in (state.tone_t, state.tone_s, state.sh)):
            return None
        t_all = self.background_plan(state, config, mode)
        if t_all is None:
            return None
        stamp = (self._key(config, mode), state.tone_t[0].numpy().tobytes(),
                 state.tone_s[0].numpy().tobytes(), state.sh.numpy().tobytes())
        if self._baked is None or self._baked[0] != stamp:
            n = t_all.shape[1]
            alphas, colors = [], []
            for s in range(0, len(self.origins), config.chunk):
                sl = slice(s, s + config.chunk)
                m = len(self.origins[sl])
                plan = RayPlan(self.origins[sl], self.dirs[sl], {0: np.arange(m)}, {0: t_all[sl]})
                with torch.no_grad():
                    out = evaluate_plan(state, plan, config, details=True)
                # per-sample alpha and color of the single-field render
                alphas.append(out.details["alpha"][:, :n])
                colors.append(out.details["color"][:, :n])
            self._baked = (stamp, torch.cat(alphas), torch.cat(colors))
        return self._baked[1], self._baked[2]


def plan_photometric(state, observed, pixels, rays: PixelRays, config: RenderConfig,
                     mode="safe"):
    bg_t = rays.background_plan(state, config, mode)
    fixed = None
    if bg_t is not None:
        fixed = {0: (np.arange(len(pixels)), torch.as_tensor(bg_t)[torch.as_tensor(pixels)])}
    plan = plan_rays(state, rays.origins[pixels], rays.dirs[pixels], config, mode, fixed)
    baked = rays.background_baked(state, config, mode)
    if baked is not None:
        pix = torch.as_tensor(pixels)
        plan.baked[0] = (baked[0][pix], baked[1][pix])
    target = torch.as_tensor(np.asarray(observed, dtype=np.float64).reshape(-1, 3)[pixels])
    return PhotometricPlan(pixels, plan, target)


def loss_pho(state, pplan: PhotometricPlan, config: RenderConfig):
    """Mean squared color error over the planned rays."""
    if len(pplan.pixels) == 0:
        return torch.zeros((), dtype=DTYPE)
    out = evaluate_plan(state, pplan.plan, config)
    return ((out.color - pplan.target) ** 2).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# Observation
# ---------------------------------------------------------------------------

def loss_obs(state, p_init, p_cam):
    """Bearing consistency of object centers with their initial estimates."""
    if state.num_objects == 0:
        return torch.zeros((), dtype=DTYPE)
    a = torch.as_tensor(np.asarray(p_init, dtype=np.float64).reshape(-1, 3)) \
        - torch.as_tensor(np.asarray(p_cam, dtype=np.float64))
    b = state.p - torch.as_tensor(np.asarray(p_cam, dtype=np.float64))
    cos = (a * b).sum(dim=1) / (torch.linalg.norm(a, dim=1) * torch.linalg.norm(b, dim=1)).clamp(
        min=1e-12)
    return ((1.0 - cos) ** 2).sum()


# ---------------------------------------------------------------------------
# Magnetic
# ---------------------------------------------------------------------------

ATTACH_FRACTION = 0.25
MIN_SLOPE = 0.2


@dataclass
class MagneticTerm:
    """Frozen probe of one relation, reduced to what the loss needs."""

    subject: int
    target: int
    x_sub: torch.Tensor
    x_tgt: torch.Tensor
    s_sub: torch.Tensor
    s_tgt: torch.Tensor
    den_sub: torch.Tensor
    den_tgt: torch.Tensor
    attach: torch.Tensor   # indices of the nearest positive gaps
    violate: torch.Tensor  # indices of negative gaps


def _slope(grad, v):
    """Directional derivative along the trace direction, kept away from zero."""
    den = grad @ v
    return -np.maximum(-den, MIN_SLOPE)


def plan_magnetic(scene, relations, config: RenderConfig = None):
    terms = []
    for rel in relations:
        pr = probe(scene, rel.subject, rel.target, rel.direction, config)
        v = pr.valid
        if not v.any():
            terms.append(None)
            continue
        d = pr.direction
        gaps = (pr.s_tgt - pr.s_sub)[v]
        pos = np.nonzero(gaps > 0)[0]
        neg = np.nonzero(gaps <= 0)[0]
        if len(pos):
            keep = max(1, int(math.ceil(ATTACH_FRACTION * len(pos))))
            pos = pos[np.argsort(gaps[pos], kind="stable")[:keep]]
        terms.append(MagneticTerm(
            rel.subject, rel.target,
            torch.as_tensor(pr.x_sub[v]), torch.as_tensor(pr.x_tgt[v]),
            torch.as_tensor(pr.s_sub[v]), torch.as_tensor(pr.s_tgt[v]),
            torch.as_tensor(_slope(pr.n_sub[v], -d)), torch.as_tensor(_slope(pr.n_tgt[v], d)),
            torch.as_tensor(pos, dtype=torch.long), torch.as_tensor(neg, dtype=torch.long)))
    return terms


def _field_world(state, k, x):
    R, p = state.frames()
    return state.fields[k].sample((x - p[k]) @ R[k])


def magnetic_gaps(state, term: MagneticTerm):
    """Signed surface gaps along the probe, first-order in the poses."""
    s_sub = term.s_sub + _field_world(state, term.subject, term.x_sub) / term.den_sub
    s_tgt = term.s_tgt - _field_world(state, term.target, term.x_tgt) / term.den_tgt
    return s_tgt - s_sub


def loss_mag(state, terms):
    """Mean over relations of relu(attachment gap) + relu(violation depth)."""
    if not terms:
        return torch.zeros((), dtype=DTYPE)
    total = torch.zeros((), dtype=DTYPE)
    for term in terms:
        if term is None:
            continue
        g = magnetic_gaps(state, term)
        d_a = g[term.attach].mean() if len(term.attach) else torch.zeros((), dtype=DTYPE)
        d_v = (-g[term.violate]).mean() if len(term.violate) else torch.zeros((), dtype=DTYPE)
        total = total + torch.relu(d_a) + torch.relu(d_v)
    return total / len(terms)


def attachment_distances(state, terms):
    """``(d_a, d_v)`` per relation as floats (``None`` for skipped ones)."""
    out = []
    with torch.no_grad():
        for term in terms:
            if term is None:
                out.append(None)
                continue
            g = magnetic_gaps(state, term)
            d_a = float(g[term.attach].mean()) if len(term.attach) else 0.0
            d_v = float((-g[term.violate]).mean()) if len(term.violate) else 0.0
            out.append((d_a, d_v))
    return out


# ---------------------------------------------------------------------------
# Violation
# ---------------------------------------------------------------------------

def surface_points(fld, P=1000, config: RenderConfig = None):
    """``P`` local-frame points on the outside-visible surface of a field,
    found by tracing inwards from a grid on each face of its box."""
    # cached on the field so the points go away with it
    cache = fld.__dict__.setdefault("_surface_points", {})
    if P in cache:
        return cache[P]
    cfg = config or RenderConfig()
    box = fld.bbox
    n = max(4, int(math.ceil(math.sqrt(2.0 * P / 6.0))))
    fr = (np.arange(n) + 0.5) / n
    pts = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        A, B = np.meshgrid(box.min[a] + fr * box.extent[a], box.min[b] + fr * box.extent[b],
                           indexing="ij")
        for side, sign in ((box.min[axis], 1.0), (box.max[axis], -1.0)):
            o = np.zeros((n * n, 3))
            o[:, a], o[:, b], o[:, axis] = A.reshape(-1), B.reshape(-1), side
            d = np.zeros((n * n, 3))
            d[:, axis] = sign
            t, hit = trace_field(fld, np.eye(3), np.zeros(3), o, d, np.zeros(n * n),
                                 np.full(n * n, box.extent[axis]), cfg)
            pts.append((o + t[:, None] * d)[hit])
    pts = np.concatenate(pts)
    if len(pts) > P:
        pts = pts[np.linspace(0, len(pts) - 1, P).round().astype(int)]
    cache[P] = pts
    return pts


@dataclass
class ViolationPlan:
    points: list          # per object, (P, 3) local surface points
    neighbors: list       # per object, field indices (0 = background)


def plan_violation(scene, P=1000, O=3, config=None):
    pts = [torch.as_tensor(surface_points(o.field, P, config)) for o in scene.objects]
    return ViolationPlan(pts, nearest_neighbors(scene, k=O))


def loss_vio(state, vplan: ViolationPlan, eps=0.025):
    """Hinge on surface points sinking deeper than ``eps`` into neighbors."""
    R, p = state.frames()
    total = torch.zeros((), dtype=DTYPE)
    for i, (pts, nbrs) in enumerate(zip(vplan.points, vplan.neighbors)):
        k = i + 1
        xw = pts @ R[k].T + p[k]
        for o in nbrs:
            if state.fields[o] is None or o == k:
                continue
            sdf = state.fields[o].sample((xw - p[o]) @ R[o])
            total = total + torch.relu(-(sdf + eps)).sum()
    return total


# ---------------------------------------------------------------------------
# Gravity
# ---------------------------------------------------------------------------

def loss_g(state, constrained=None):
    """Sum of ``1 - cos(R g, g)`` over gravity-constrained objects."""
    if state.num_objects == 0:
        return torch.zeros((), dtype=DTYPE)
    R, _ = state.frames()
    g = state.gravity / torch.linalg.norm(state.gravity)
    Rg = R[1:] @ g
    cos = (Rg @ g) / torch.linalg.norm(Rg, dim=1)
    term = 1.0 - cos
    if constrained is not None:
        term = term * torch.as_tensor(np.asarray(constrained, dtype=np.float64))
    return term.sum()


# ---------------------------------------------------------------------------
# Combined
# ---------------------------------------------------------------------------

TERMS = ("pho", "obs", "mag", "vio", "g")


def total_loss(terms: dict, lambda_pho=1.0, lambda_obs=100.0, lambda_phy=1.0):
    """Weighted sum; physical terms (mag, vio, g) share one weight."""
    return (lambda_pho * terms["pho"] + lambda_obs * terms["obs"]
            + lambda_phy * (terms["mag"] + terms["vio"] + terms["g"]))


def value_and_grad(loss_fn, state):
    """Evaluate ``loss_fn(state)`` and return ``(value, {name: gradient})``;
    parameters the loss does not reach get exact zeros."""
    params = state.parameters()
    for t in params.values():
        t.grad = None
    state.invalidate()
    loss = loss_fn(state)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, t), g in zip(params.items(), grads):
        out[name] = np.zeros(tuple(t.shape)) if g is None else g.numpy().copy()
    return float(loss.detach()), out
