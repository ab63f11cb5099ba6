"""Synthetic ground-truth rooms built from baked primitives.

A synthetic scene is a textured box room with box-shaped furniture resting
on the floor (some backed against a wall), rendered to a panorama, plus
initial poses perturbed away from the truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fields import Aabb, AnalyticField, bake_grid
from .geometry import yaw_matrix
from .io import read_grid, write_grid, write_image, write_imgf, write_label_png
from .lighting import ShIrradiance, ToneAdjust
from .relations import DEFAULT_RULES
from .render import RenderConfig, instance_masks, render_image
from .scene import Camera, ObjectInstance, Pose, Scene, save_poses, save_scene

# name -> (half extents, wall-backed)
CATALOG = {
    "bottom_cabinet": ((0.25, 0.45, 0.40), True),
    "shelf": ((0.20, 0.40, 0.55), True),
    "nightstand": ((0.22, 0.22, 0.28), True),
    "table": ((0.40, 0.60, 0.37), False),
    "chair": ((0.24, 0.24, 0.45), False),
    "desk": ((0.35, 0.55, 0.38), False),
}


# gap kept to every wall an object is not meant to touch: the relation
# threshold plus headroom for the initial pose noise
WALL_CLEARANCE = 0.75


@dataclass
class SynthSpec:
    num_objects: int = 3
    room: tuple = (6.0, 5.0, 2.8)
    width: int = 320
    height: int = 160
    rot_noise_deg: float = 15.0
    trans_noise: float = 0.2
    object_grid: int = 96
    room_grid: int = 128
    camera_height: float = 1.4
    penetration: float = 0.0
    categories: tuple = ("bottom_cabinet", "table", "chair")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("room", "categories"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


def _texture(base, freq, phase):
    base = np.asarray(base)

    def fn(x):
        a = np.sin(2 * np.pi * freq[0] * x[:, 0] + phase[0])
        b = np.sin(2 * np.pi * freq[1] * x[:, 1] + phase[1])
        c = np.sin(2 * np.pi * freq[2] * x[:, 2] + phase[2])
        pattern = np.stack([a * b, b * c, c * a], axis=1)
        return np.clip(base + 0.18 * pattern + 0.08 * (a + b + c)[:, None] / 3, 0.02, 0.98)

    return fn


def room_albedo(room):
    wx, wy, wz = room

    def fn(x):
        out = np.empty((len(x), 3))
        floor = x[:, 2] < 0.5 * wz * 0.3
        ceiling = x[:, 2] > wz - 0.3
        s1 = np.sin(2 * np.pi * x[:, 0] / 0.9)
        s2 = np.sin(2 * np.pi * x[:, 1] / 0.7)
        s3 = np.sin(2 * np.pi * x[:, 2] / 0.8)
        wall = 0.55 + 0.12 * np.stack([s1 * s3, s2 * s3, (s1 + s2) * 0.5], 1)
        wall[:, 0] += 0.1 * (x[:, 0] > 0)
        wall[:, 2] += 0.1 * (x[:, 1] > 0)
        out[:] = wall
        fl = 0.35 + 0.15 * np.stack([s1 * s2, s1, s2], 1)
        out[floor] = fl[floor] * [1.0, 0.8, 0.6]
        out[ceiling] = 0.85
        return np.clip(out, 0.02, 0.98)

    return fn


def make_room(room, dims=128, margin=0.25):
    wx, wy, wz = room
    half = np.array([wx, wy, wz]) / 2
    center = np.array([0.0, 0.0, wz / 2])
    shell = AnalyticField.room_shell(center, half)
    box = Aabb(center - half - margin, center + half + margin)
    grid = bake_grid(shell, (dims, dims, dims), box, room_albedo(room))
    return grid


def make_object(half, dims, rng, margin=0.05):
    half = np.asarray(half, dtype=np.float64)
    prim = AnalyticField.box(np.zeros(3), half)
    base = rng.uniform(0.25, 0.75, 3)
    freq = rng.uniform(1.5, 3.0, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    box = Aabb(-half - margin, half + margin)
    return bake_grid(prim, (dims, dims, dims), box, _texture(base, freq, phase))


def _footprint(center_xy, half, yaw):
    R = yaw_matrix(yaw)[:2, :2]
    corners = np.array([[sx * half[0], sy * half[1]] for sx in (-1, 1) for sy in (-1, 1)])
    return corners @ R.T + center_xy


def _place(rng, spec, halves, backed):
    """Rejection-sample non-overlapping floor placements."""
    wx, wy, _ = spec.room
    placed = []
    for half, wall in zip(halves, backed):
        for _ in range(2000):
            if wall:
                side = rng.integers(4)
                # back face (local -x) against the chosen wall
                yaw = [0.0, np.pi, np.pi / 2, -np.pi / 2][side]
                along = rng.uniform(-0.5, 0.5) * ((wy if side < 2 else wx) - 2 * half[1]
                                                  - 2 * WALL_CLEARANCE)
                if side == 0:
                    xy = np.array([-wx / 2 + half[0], along])
                elif side == 1:
                    xy = np.array([wx / 2 - half[0], along])
                elif side == 2:
                    xy = np.array([along, -wy / 2 + half[0]])
                else:
                    xy = np.array([along, wy / 2 - half[0]])
            else:
                yaw = rng.uniform(-np.pi, np.pi)
                lim = np.array([wx, wy]) / 2 - WALL_CLEARANCE
                xy = rng.uniform(-lim, lim)
            fp = _footprint(xy, half, yaw)
            if not wall and (np.abs(fp[:, 0]).max() > wx / 2 - WALL_CLEARANCE
                             or np.abs(fp[:, 1]).max() > wy / 2 - WALL_CLEARANCE):
                continue
            # keep clear of the camera (at the origin) and of other objects
            if np.linalg.norm(xy) < np.linalg.norm(half[:2]) + 0.9:
                continue
            r = np.linalg.norm(half[:2])
            if any(np.linalg.norm(xy - q) < r + rq + 0.3 for q, rq, *_ in placed):
                continue
            placed.append((xy, r, yaw, half))
            break
        else:
            raise RuntimeError("could not place objects; room too small")
    return placed


def perturb_pose(pose: Pose, rng, rot_deg, trans, yaw_only=True):
    angle = np.radians(rng.uniform(-rot_deg, rot_deg))
    if yaw_only:
        dR = yaw_matrix(angle)
    else:
        from .geometry import axis_angle_matrix
        axis = rng.normal(size=3)
        dR = axis_angle_matrix(axis, angle)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    dp = direction * rng.uniform(0.0, trans)
    return Pose.from_matrix(dR @ pose.R, pose.p + dp)


@dataclass
class SynthResult:
    scene: Scene
    init_scene: Scene
    observed: np.ndarray
    masks: np.ndarray
    gt_poses: list
    init_poses: list
    spec: SynthSpec = field(default_factory=SynthSpec)


def synth_scene(spec: SynthSpec, seed: int, render_config: RenderConfig = None,
                quantize=True) -> SynthResult:
    """Build a room, furnish it, render the ground-truth panorama and perturb
    the poses. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    cfg = render_config or RenderConfig()
    room = make_room(spec.room, spec.room_grid)
    cats = [spec.categories[i % len(spec.categories)] for i in range(spec.num_objects)]
    halves = [np.array(CATALOG[c][0]) * rng.uniform(0.9, 1.1, 3) for c in cats]
    backed = [CATALOG[c][1] for c in cats]
    placed = _place(rng, spec, halves, backed)
    objects = []
    for i, (cat, (xy, _, yaw, half)) in enumerate(zip(cats, placed)):
        grid = make_object(half, spec.object_grid, rng)
        pose = Pose.from_matrix(yaw_matrix(yaw), [xy[0], xy[1], half[2]])
        objects.append(ObjectInstance(f"{cat}_{i}", cat, grid, pose, ToneAdjust()))
    cam = Camera(position=[0.0, 0.0, spec.camera_height])
    scene = Scene(room, objects, ShIrradiance.uniform(), cam)
    if quantize:
        scene = _roundtrip_f32(scene)
    img = render_image(scene, cam, spec.width, spec.height, cfg)
    masks = instance_masks(img.weights)
    init = []
    for ob in scene.objects:
        yaw_only = DEFAULT_RULES.get(ob.category, {}).get("yaw_only", True)
        pose = perturb_pose(ob.pose, rng, spec.rot_noise_deg, spec.trans_noise, yaw_only)
        if spec.penetration > 0:
            pose = _penetrate(pose, ob, spec)
        init.append(pose)
    gt = [o.pose.copy() for o in scene.objects]
    return SynthResult(scene, scene.with_poses(init), img.color, masks, gt, init, spec)


def _penetrate(pose, ob, spec):
    """Push an initial pose into the nearest wall (wall-backed categories)
    or into the floor by ``spec.penetration`` meters."""
    p = pose.p.copy()
    if CATALOG.get(ob.category, (None, False))[1]:
        back = -pose.R[:, 0]
        back[2] = 0.0
        back /= np.linalg.norm(back)
        p += spec.penetration * back
    else:
        p[2] -= spec.penetration
    return Pose(pose.r6, p)


def _roundtrip_f32(scene):
    """Round every grid to the float32 precision of the on-disk format."""
    from .fields import GridField

    def rt(g):
        alb = None if g.albedo is None else g.albedo.astype(np.float32).astype(np.float64)
        bbox = Aabb(g.bbox.min.astype(np.float32), g.bbox.max.astype(np.float32))
        return GridField(g.dims, bbox, g.sdf.astype(np.float32).astype(np.float64), alb)

    out = scene.copy()
    out.background = rt(scene.background)
    for ob in out.objects:
        ob.field = rt(ob.field)
        ob._bbox = None
    return out


def write_synth(result: SynthResult, out_dir, seed=None):
    """Write fields, ground-truth / initial scenes and poses, the observed
    panorama (PNG and float) and the instance masks."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = result.scene
    write_grid(out / "room.sdfg", scene.background)
    scene.background_path = "room.sdfg"
    for ob in scene.objects:
        ob.field_path = f"{ob.id}.sdfg"
        write_grid(out / ob.field_path, ob.field)
    init = result.init_scene
    init.background_path = "room.sdfg"
    for a, b in zip(init.objects, scene.objects):
        a.field_path = b.field_path
    save_scene(scene, out / "scene_gt.json")
    save_scene(init, out / "scene_init.json")
    ids = [o.id for o in scene.objects]
    save_poses(out / "gt.json", ids, result.gt_poses)
    save_poses(out / "init.json", ids, result.init_poses)
    write_image(out / "observed.png", result.observed)
    write_imgf(out / "observed.imgf", result.observed)
    write_label_png(out / "masks.png", result.masks)
    meta = asdict(result.spec)
    meta["seed"] = seed
    (out / "synth.json").write_text(json.dumps(meta, indent=2))
    return out
