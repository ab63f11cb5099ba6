"""Two-phase holistic pose and appearance fitting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import NonFiniteLoss, ValidationError
from .losses import (PixelRays, TERMS, loss_g, loss_mag, loss_obs, loss_pho, loss_vio,
                     plan_magnetic, plan_photometric, plan_violation, sample_rays, total_loss)
from .relations import DEFAULT_RULES, RuleTable, generate_relations
from .render import RenderConfig, evaluate_plan
from .scene import SceneState


@dataclass
class OptimConfig:
    lambda_pho: float = 1.0
    lambda_obs: float = 100.0
    lambda_phy: float = 1.0
    iterations: int = 500
    relation_regen_period: int = 50
    rays_per_step: int = 1024
    background_ray_fraction: float = 0.2
    lr_position: float = 1e-2
    lr_rotation: float = 5e-2
    lr_tone: float = 1e-2
    lr_light: float = 1e-2
    betas: tuple = (0.9, 0.999)
    # learning rates decay geometrically to this fraction by the last step
    lr_final_factor: float = 0.05
    # rotation learning rate ramps up linearly over this many steps, so gross
    # initial penetrations are resolved by translation rather than by tilting
    rotation_warmup: int = 50
    vio_eps: float = 0.025
    vio_neighbors: int = 3
    vio_points: int = 1000
    mask_dilation: int = 5
    appearance_iterations: int = 200
    optimize_tone: bool = True
    optimize_light: bool = True
    mode: str = "safe"
    sharpness: float = 64.0
    relation_threshold: float = 0.5
    # per-object gradient norm cap for each pose block (0 disables)
    grad_clip: float = 1.0
    # loss terms taking part; a term also needs a positive weight
    terms: tuple = TERMS
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.terms = tuple(self.terms)
        if set(self.terms) - set(TERMS):
            raise ValidationError(f"unknown loss terms {sorted(set(self.terms) - set(TERMS))}")
        if min(self.lambda_pho, self.lambda_obs, self.lambda_phy) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.rays_per_step < 1:
            raise ValidationError("rays_per_step must be at least 1")
        if self.rotation_warmup < 0:
            raise ValidationError("rotation_warmup must be non-negative")
        if self.mode not in ("safe", "full"):
            raise ValidationError(f"unknown render mode {self.mode!r}")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown optimizer options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["terms"] = list(self.terms)
        return d


@dataclass
class FitResult:
    scene: object
    trace: list
    relations: list = field(default_factory=list)

    def trace_csv(self):
        return trace_to_csv(self.trace)


TRACE_COLUMNS = ("step", "L_pho", "L_obs", "L_mag", "L_vio", "L_g", "total")


def trace_to_csv(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([row["step"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])
    return buf.getvalue()


def write_trace(path, trace):
    Path(path).write_text(trace_to_csv(trace))


def _check_finite(step, values):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteLoss(step, bad)


def _gravity_mask(scene, rules: RuleTable):
    return [1.0 if rules[o.category].get("yaw_only", True) else 0.0 for o in scene.objects]


def _clip_rows(grad, limit):
    """Rescale each object's gradient row to norm at most ``limit``.

    A deep initial penetration gives violation gradients orders of magnitude
    above the photometric ones; unclipped, they inflate Adam's second-moment
    estimate and stall the later fine alignment.
    """
    if grad is None:
        return
    with torch.no_grad():
        norm = torch.linalg.norm(grad, dim=1, keepdim=True)
        grad.mul_(torch.clamp(limit / norm.clamp(min=1e-300), max=1.0))


def _decay(cfg, steps):
    if steps <= 1 or cfg.lr_final_factor >= 1.0:
        return 1.0
    return cfg.lr_final_factor ** (1.0 / (steps - 1))


def _pose_schedule(opt, cfg):
    gamma = _decay(cfg, cfg.iterations)
    warm = cfg.rotation_warmup

    def rotation(step):
        ramp = min(1.0, (step + 1) / warm) if warm > 0 else 1.0
        return ramp * gamma ** step

    return torch.optim.lr_scheduler.LambdaLR(opt, [lambda step: gamma ** step, rotation])


class LossContext:
    """Everything the per-step losses need besides the live parameters."""

    def __init__(self, scene, observed, masks, config: OptimConfig,
                 render_config: RenderConfig = None, rules: RuleTable = None):
        self.cfg = config
        self.rcfg = render_config or RenderConfig(sharpness=config.sharpness)
        self.rules = rules or RuleTable()
        H, W = np.asarray(observed).shape[:2]
        self.W, self.H = W, H
        self.observed = np.asarray(observed, dtype=np.float64)
        self.masks = np.asarray(masks)
        self.rays = PixelRays(scene.camera, W, H)
        self.p_init = np.array([o.pose.p for o in scene.objects]).reshape(-1, 3)
        self.p_cam = np.asarray(scene.camera.position, dtype=np.float64)
        self.gravity_mask = _gravity_mask(scene, self.rules)
        self.rng = np.random.default_rng(config.seed)

    def photometric_plan(self, state):
        pix = sample_rays(self.masks, self.W, self.H, self.cfg.rays_per_step, self.rng,
                          self.cfg.background_ray_fraction, self.cfg.mask_dilation)
        return plan_photometric(state, self.observed, pix, self.rays, self.rcfg, self.cfg.mode)

    def terms(self, state, pplan, mplan, vplan, enabled=TERMS):
        zero = torch.zeros((), dtype=torch.float64)
        out = {}
        out["pho"] = loss_pho(state, pplan, self.rcfg) if "pho" in enabled else zero
        out["obs"] = loss_obs(state, self.p_init, self.p_cam) if "obs" in enabled else zero
        out["mag"] = loss_mag(state, mplan) if "mag" in enabled else zero
        out["vio"] = loss_vio(state, vplan, self.cfg.vio_eps) if "vio" in enabled else zero
        out["g"] = loss_g(state, self.gravity_mask) if "g" in enabled else zero
        return out

    def total(self, terms):
        return total_loss(terms, self.cfg.lambda_pho, self.cfg.lambda_obs, self.cfg.lambda_phy)


def _tone_pivot(state, ctx):
    """Per field and channel mean of the untoned color seen by one ray batch."""
    with torch.no_grad():
        pplan = ctx.photometric_plan(state)
        out = evaluate_plan(state, pplan.plan, ctx.rcfg, details=True)
    k = out.details["field"]
    w = out.details["weights"]
    seen = k >= 0
    k, w = k[seen], w[seen]
    raw = out.details["color"][seen] * state.tone_s[k] + state.tone_t[k]
    F_ = len(state.fields)
    num = torch.zeros(F_, 3, dtype=torch.float64).index_add_(0, k, w[:, None] * raw)
    den = torch.zeros(F_, dtype=torch.float64).index_add_(0, k, w)
    pivot = torch.full((F_, 3), 0.5, dtype=torch.float64)
    ok = den > 1e-9
    pivot[ok] = num[ok] / den[ok, None]
    return pivot


def _row(step, terms, total):
    row = {"step": step, "total": float(total.detach())}
    for k, name in zip(TERMS, TRACE_COLUMNS[1:6]):
        row[name] = float(terms[k].detach())
    return row


def holistic_optimize(scene, observed, masks, init_poses=None, relations=None,
                      config: OptimConfig = None, render_config: RenderConfig = None,
                      rules: RuleTable = None, callback=None) -> FitResult:
    """Fit object poses (phase 1), then tone adjusters and lighting (phase 2).

    ``scene`` supplies fields, camera and starting appearance; ``init_poses``
    (if given) replaces its object poses and also serves as the bearing
    reference of the observation term. ``relations`` seeds the first relation
    set; later ones are regenerated every ``relation_regen_period`` steps.
    """
    cfg = config or OptimConfig()
    if init_poses is not None:
        scene = scene.with_poses(init_poses)
    ctx = LossContext(scene, observed, masks, cfg, render_config, rules)
    enabled = [t for t, lam in (("pho", cfg.lambda_pho), ("obs", cfg.lambda_obs),
                                ("mag", cfg.lambda_phy), ("vio", cfg.lambda_phy),
                                ("g", cfg.lambda_phy)) if lam > 0 and t in cfg.terms]
    mag, vio = "mag" in enabled, "vio" in enabled
    trace = []
    state = SceneState(scene)
    rels = list(relations) if relations is not None else None
    vplan = None

    if cfg.iterations > 0 and state.num_objects > 0:
        state.r6.requires_grad_(True)
        state.p.requires_grad_(True)
        opt = torch.optim.Adam([
            {"params": [state.p], "lr": cfg.lr_position},
            {"params": [state.r6], "lr": cfg.lr_rotation},
        ], betas=cfg.betas)
        sched = _pose_schedule(opt, cfg)
        for step in range(cfg.iterations):
            current = state.to_scene()
            if mag and (rels is None or (step > 0 and step % cfg.relation_regen_period == 0)):
                rels = generate_relations(current, rules=ctx.rules,
                                          threshold=cfg.relation_threshold, config=ctx.rcfg)
            state.invalidate()
            pplan = ctx.photometric_plan(state) if "pho" in enabled else None
            mplan = plan_magnetic(current, rels, ctx.rcfg) if mag else []
            if vio:
                vplan = plan_violation(current, cfg.vio_points, cfg.vio_neighbors, ctx.rcfg)
            terms = ctx.terms(state, pplan, mplan, vplan, enabled)
            loss = ctx.total(terms)
            row = _row(step, terms, loss)
            _check_finite(step, {k: row[k] for k in TRACE_COLUMNS[1:]})
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                _clip_rows(state.p.grad, cfg.grad_clip)
                _clip_rows(state.r6.grad, cfg.grad_clip)
            opt.step()
            sched.step()
            trace.append(row)
            if callback:
                callback(step, row, state)
        state.r6.requires_grad_(False)
        state.p.requires_grad_(False)

    if cfg.appearance_iterations > 0 and (cfg.optimize_tone or cfg.optimize_light):
        groups = []
        if cfg.optimize_tone:
            # t = m - s * v around the mean untoned color m keeps the offset and
            # scale directions decoupled, which plain (t, s) steps are not
            pivot = _tone_pivot(state, ctx)
            tone_s = state.tone_s.detach().clone().requires_grad_(True)
            tone_v = ((pivot - state.tone_t) / tone_s).detach().requires_grad_(True)
            groups.append({"params": [tone_v, tone_s], "lr": cfg.lr_tone})
        if cfg.optimize_light:
            state.sh.requires_grad_(True)
            groups.append({"params": [state.sh], "lr": cfg.lr_light})
        opt = torch.optim.Adam(groups, betas=cfg.betas)
        sched = torch.optim.lr_scheduler.ExponentialLR(
            opt, _decay(cfg, cfg.appearance_iterations))
        state.invalidate()
        current = state.to_scene()
        # poses are frozen: the geometric terms are constants of this phase
        if mag and rels is None:
            rels = generate_relations(current, rules=ctx.rules,
                                      threshold=cfg.relation_threshold, config=ctx.rcfg)
        with torch.no_grad():
            mplan = plan_magnetic(current, rels, ctx.rcfg) if mag else []
            vplan = plan_violation(current, cfg.vio_points, cfg.vio_neighbors,
                                   ctx.rcfg) if vio else None
            fixed = ctx.terms(state, None, mplan, vplan, [t for t in enabled if t != "pho"])
        base = len(trace)
        for step in range(cfg.appearance_iterations):
            state.invalidate()
            if cfg.optimize_tone:
                state.tone_s = tone_s
                state.tone_t = pivot - tone_s * tone_v
            pplan = ctx.photometric_plan(state) if "pho" in enabled else None
            terms = dict(fixed)
            terms["pho"] = loss_pho(state, pplan, ctx.rcfg) if pplan else fixed["pho"]
            loss = ctx.total(terms)
            row = _row(base + step, terms, loss)
            _check_finite(base + step, {k: row[k] for k in TRACE_COLUMNS[1:]})
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
                opt.step()
                sched.step()
            with torch.no_grad():
                if cfg.optimize_tone:
                    tone_s.clamp_(min=2e-3)
                    state.tone_s = tone_s.detach().clone()
                    state.tone_t = pivot - state.tone_s * tone_v.detach()
            state.invalidate()
            trace.append(row)
            if callback:
                callback(base + step, row, state)
        state.sh.requires_grad_(False)

    return FitResult(state.to_scene(), trace, rels or [])


def grad_check(loss_fn, params: dict, h=1e-6, tol=1e-3, atol=1e-6, max_entries=None):
    """Compare autograd against central differences.

    ``loss_fn()`` must be a deterministic function of the tensors in
    ``params`` (frozen plans). Returns ``{block: {"max_rel", "max_abs",
    "ok", "checked"}}`` where an entry passes when ``|a - n| <= max(atol,
    tol * max(|a|, |n|))``.
    """
    for t in params.values():
        t.requires_grad_(True)
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    report = {}
    for (name, t), g in zip(params.items(), grads):
        g = torch.zeros_like(t) if g is None else g.detach()
        flat = t.data.view(-1)
        idx = range(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = np.linspace(0, flat.numel() - 1, max_entries).round().astype(int)
        worst_rel, worst_abs, ok = 0.0, 0.0, True
        for i in idx:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
            num = (up - down) / (2 * h)
            ana = float(g.view(-1)[i])
            err = abs(ana - num)
            scale = max(abs(ana), abs(num))
            worst_abs = max(worst_abs, err)
            if scale > atol:
                worst_rel = max(worst_rel, err / scale)
            ok &= err <= max(atol, tol * scale)
        report[name] = {"max_rel": worst_rel, "max_abs": worst_abs, "ok": bool(ok),
                        "checked": len(idx)}
    return report


def perturbed_poses(scene, rot_deg=2.0, trans=0.01, sink=0.05, seed=0):
    """Small deterministic pose offsets used to move off the zero-loss point:
    a random tilt and shift plus ``sink`` meters along gravity, which pushes
    resting objects into their supports."""
    from .geometry import axis_angle_matrix
    from .scene import Pose

    rng = np.random.default_rng(seed)
    g = np.asarray(scene.gravity, dtype=np.float64)
    g = g / np.linalg.norm(g)
    out = []
    for ob in scene.objects:
        dR = axis_angle_matrix(rng.normal(size=3), np.radians(rot_deg))
        dp = rng.normal(size=3)
        p = ob.pose.p + trans * dp / np.linalg.norm(dp) - sink * g
        out.append(Pose.from_matrix(dR @ ob.pose.R, p))
    return out


def gradient_suite(scene, observed=None, masks=None, terms=TERMS, sharpness=16.0, rays=256,
                   h=1e-7, tol=1e-3, atol=1e-6, width=64, height=32, seed=0,
                   relations=None, rules: RuleTable = None):
    """Finite-difference check of every loss term over every parameter block.

    Without ``observed``, the scene itself is rendered as the target and the
    check runs at slightly perturbed poses, tones and lighting so that every
    gradient is nonzero. All discrete choices (ray samples, probe hits,
    neighbor sets) are frozen before differencing. Returns
    ``{term: grad_check report}``.
    """
    rcfg = RenderConfig(sharpness=sharpness)
    rules = rules or RuleTable()
    observed_given = observed is not None
    if observed is None:
        from .render import render_image
        img = render_image(scene, scene.camera, width, height, rcfg)
        observed = img.color
        masks = np.where(img.weights.max(axis=2) > 0.5, img.weights.argmax(axis=2), 0)
        rng = np.random.default_rng(seed)
        work = scene.with_poses(perturbed_poses(scene, seed=seed))
        for ob in work.objects:
            ob.tone.t = ob.tone.t + rng.uniform(-0.02, 0.02, 3)
            ob.tone.s = ob.tone.s * rng.uniform(0.95, 1.05, 3)
        work.lighting = work.lighting.scaled(1.05)
    else:
        work = scene
        if masks is None:
            raise ValidationError("masks are required with an observed image")
    cfg = OptimConfig(rays_per_step=rays, sharpness=sharpness, seed=seed)
    ctx = LossContext(work, observed, masks, cfg, rcfg, rules)
    # bearings refer to laterally offset centers so the observation term is live
    ctx.p_init = np.array([o.pose.p for o in scene.objects]).reshape(-1, 3)
    if not observed_given:
        lateral = np.random.default_rng(seed + 1).normal(size=ctx.p_init.shape)
        lateral[:, 2] = 0.0
        ctx.p_init = ctx.p_init + 0.25 * lateral / np.linalg.norm(lateral, axis=1, keepdims=True)
    state = SceneState(work, requires_grad=True)
    with torch.no_grad():
        pplan = ctx.photometric_plan(state) if "pho" in terms else None
    current = state.to_scene()
    if relations is None and "mag" in terms:
        relations = generate_relations(current, rules=rules, config=rcfg)
    mplan = plan_magnetic(current, relations or [], rcfg) if "mag" in terms else []
    vplan = plan_violation(current, cfg.vio_points, cfg.vio_neighbors, rcfg) \
        if "vio" in terms else None
    fns = {
        "pho": lambda: loss_pho(state, pplan, rcfg),
        "obs": lambda: loss_obs(state, ctx.p_init, ctx.p_cam),
        "mag": lambda: loss_mag(state, mplan),
        "vio": lambda: loss_vio(state, vplan, cfg.vio_eps),
        "g": lambda: loss_g(state, ctx.gravity_mask),
    }
    report = {}
    for term in terms:
        def fn(f=fns[term]):
            state.invalidate()
            return f()
        report[term] = grad_check(fn, state.parameters(), h=h, tol=tol, atol=atol)
    return report
