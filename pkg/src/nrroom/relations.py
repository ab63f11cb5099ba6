"""Physical relations between objects and the room, found by probing rays.

A probe casts an 8x8 grid of parallel rays along a direction ``d`` across the
footprint of a subject object. Per ray it finds the subject's own surface
(tracing the subject backwards along ``-d``) and the target's surface ahead
(tracing the target forwards from a back-offset start); the signed gap
between the two is positive for clearance and negative for penetration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ValidationError
from .fields import DTYPE
from .geometry import orthonormal_basis
from .render import RenderConfig, trace_field

KINDS = ("floor_support", "wall_attach", "object_support")
DOWN = np.array([0.0, 0.0, -1.0])

PROBE_GRID = 8
BACK_OFFSETS = (0.5, 0.75, 1.0, 1.25, 1.5)
PROBE_RANGE = 1.5
SUBJECT_MARGIN = 0.05
CANDIDATE_DISTANCE = 0.5
OPPOSITION_COS = math.cos(math.radians(30.0))


@dataclass
class Relation:
    kind: str
    subject: int
    target: int
    direction: np.ndarray
    distance: float = float("nan")

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown relation kind {self.kind!r}")
        if self.subject == self.target:
            raise ValueError("relation subject and target must differ")
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.direction = d / np.linalg.norm(d)

    def key(self):
        return (self.kind, self.subject, self.target, tuple(np.round(self.direction, 12)))

    def __eq__(self, other):
        return (isinstance(other, Relation) and self.key() == other.key()
                and (self.distance == other.distance
                     or (math.isnan(self.distance) and math.isnan(other.distance))))

    def to_dict(self, scene=None):
        d = {"kind": self.kind, "subject": self.subject, "target": self.target,
             "direction": self.direction.tolist(), "distance": self.distance}
        if scene is not None:
            d["subject_id"] = scene.objects[self.subject - 1].id
            d["target_id"] = "background" if self.target == 0 else scene.objects[self.target - 1].id
        return d


# ---------------------------------------------------------------------------
# Rule table
# ---------------------------------------------------------------------------

_FLAG_DEFAULTS = {"must_attach_wall": False, "must_attach_floor": False, "forbid_floor": False,
                  "may_support_on": None, "yaw_only": False}

DEFAULT_RULES = {
    "bed": {"must_attach_wall": True, "must_attach_floor": True, "yaw_only": True},
    "shelf": {"must_attach_wall": True, "yaw_only": True},
    "nightstand": {"must_attach_wall": True, "yaw_only": True},
    "wall_picture": {"must_attach_wall": True, "forbid_floor": True, "yaw_only": True},
    "chair": {"must_attach_floor": True, "yaw_only": True},
    "bottom_cabinet": {"must_attach_floor": True, "yaw_only": True},
    "monitor": {"forbid_floor": True, "may_support_on": ["desk", "table"]},
    "mirror": {"forbid_floor": True},
    "table": {"yaw_only": True},
    "desk": {"yaw_only": True},
}


class RuleTable:
    """Per-category relation flags; unknown categories get permissive defaults."""

    def __init__(self, rules=None):
        self.rules = {}
        for cat, flags in (DEFAULT_RULES if rules is None else rules).items():
            merged = {**_FLAG_DEFAULTS, **flags}
            unknown = set(flags) - set(_FLAG_DEFAULTS)
            if unknown:
                raise ValidationError(f"rule {cat!r}: unknown flags {sorted(unknown)}")
            if merged["must_attach_floor"] and merged["forbid_floor"]:
                raise ValidationError(f"rule {cat!r}: must_attach_floor and forbid_floor conflict")
            self.rules[cat] = merged

    def __getitem__(self, category):
        return self.rules.get(category, dict(_FLAG_DEFAULTS))

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.rules, indent=2))


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------

@dataclass
class Probe:
    """Frozen probe geometry and hits for one (subject, target, direction).

    Arrays are per probe ray; ``valid`` marks rays with both hits.
    """

    subject: int
    target: int
    direction: np.ndarray
    lateral: np.ndarray          # (n, 3) points on the plane through the subject center
    s_sub: np.ndarray            # subject surface coordinate along d
    s_tgt: np.ndarray            # target surface coordinate along d
    x_sub: np.ndarray            # world hit points
    x_tgt: np.ndarray
    n_sub: np.ndarray            # world SDF gradients at the hits
    n_tgt: np.ndarray
    valid: np.ndarray

    @property
    def gaps(self):
        return (self.s_tgt - self.s_sub)[self.valid]

    @property
    def any_hit(self):
        return bool(self.valid.any())


def _frames(scene):
    Rs = [np.eye(3)] + [o.pose.R for o in scene.objects]
    ps = [np.zeros(3)] + [o.pose.p for o in scene.objects]
    return Rs, ps


@torch.no_grad()
def _eval_world(fld, R, p, x, with_grad=False):
    xl = torch.as_tensor((np.asarray(x) - p) @ R, dtype=DTYPE)
    if not with_grad:
        return fld.sample(xl).numpy()
    v, g = fld.sample(xl, with_grad=True)
    return v.numpy(), g.numpy() @ np.asarray(R).T


def probe_grid(scene, subject, direction, n=PROBE_GRID):
    """Lateral ray positions and the subject's far-face coordinate along ``d``."""
    ob = scene.objects[subject - 1]
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    # lay the grid along the subject's own axes so it covers the facing side
    R = ob.pose.R
    rest = [R[:, i] for i in np.argsort(-np.abs(R.T @ d), kind="stable")[1:]]
    u = rest[0] - (rest[0] @ d) * d
    if np.linalg.norm(u) < 1e-6:
        u, w = orthonormal_basis(d)
    else:
        u = u / np.linalg.norm(u)
        w = np.cross(d, u)
    corners = ob.local_bbox.corners() @ R.T
    cu, cw, cd = corners @ u, corners @ w, corners @ d
    fr = (np.arange(n) + 0.5) / n
    gu = cu.min() + fr * (cu.max() - cu.min())
    gw = cw.min() + fr * (cw.max() - cw.min())
    UU, WW = np.meshgrid(gu, gw, indexing="ij")
    lateral = ob.pose.p + UU.reshape(-1, 1) * u + WW.reshape(-1, 1) * w
    return lateral, float(cd.max()), float(cd.max() - cd.min())


def probe(scene, subject, target, direction, config: Optional[RenderConfig] = None,
          back_offsets=BACK_OFFSETS, probe_range=PROBE_RANGE):
    cfg = config or RenderConfig()
    Rs, ps = _frames(scene)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    lateral, s_face, depth = probe_grid(scene, subject, d)
    n = len(lateral)
    sub_f = scene.field(subject)
    tgt_f = scene.field(target)

    # subject surface facing the target: trace backwards from beyond the face
    start = lateral + (s_face + SUBJECT_MARGIN) * d
    dirs = np.broadcast_to(-d, (n, 3))
    t_sub, hit_sub = trace_field(sub_f, Rs[subject], ps[subject], start, dirs,
                                 np.zeros(n), np.full(n, depth + 2 * SUBJECT_MARGIN), cfg)
    s_sub = s_face + SUBJECT_MARGIN - t_sub
    x_sub = lateral + s_sub[:, None] * d

    s_tgt = np.full(n, np.nan)
    hit_tgt = np.zeros(n, dtype=bool)
    pending = np.ones(n, dtype=bool)
    fwd = np.broadcast_to(d, (n, 3))
    for back in back_offsets:
        idx = np.nonzero(pending)[0]
        if len(idx) == 0:
            break
        origin = lateral[idx] + (s_face - back) * d
        outside = _eval_world(tgt_f, Rs[target], ps[target], origin) > cfg.hit_eps
        if target == 0:
            # beyond the room grid the boundary-clamped SDF turns positive again
            box = getattr(tgt_f, "bbox", None)
            if box is not None:
                outside &= np.all((origin >= box.min) & (origin <= box.max), axis=1)
        idx, origin = idx[outside], origin[outside]
        if len(idx) == 0:
            continue
        t, hit = trace_field(tgt_f, Rs[target], ps[target], origin, fwd[idx],
                             np.zeros(len(idx)), np.full(len(idx), back + probe_range), cfg)
        pending[idx] = False
        s_tgt[idx[hit]] = s_face - back + t[hit]
        hit_tgt[idx[hit]] = True
    x_tgt = lateral + np.nan_to_num(s_tgt)[:, None] * d
    valid = hit_sub & hit_tgt
    _, n_sub = _eval_world(sub_f, Rs[subject], ps[subject], x_sub, with_grad=True)
    _, n_tgt = _eval_world(tgt_f, Rs[target], ps[target], x_tgt, with_grad=True)
    return Probe(subject, target, d, lateral, s_sub, s_tgt, x_sub, x_tgt, n_sub, n_tgt, valid)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True).clip(min=1e-12)


def _horizontal_dirs(R):
    dirs = []
    for axis in (0, 1):
        a = R[:, axis].copy()
        a[2] = 0.0
        if np.linalg.norm(a) < 1e-6:
            continue
        a /= np.linalg.norm(a)
        dirs += [a, -a]
    return dirs


def generate_relations(scene, poses=None, rules: Optional[RuleTable] = None,
                       threshold=CANDIDATE_DISTANCE, config: Optional[RenderConfig] = None):
    """Infer floor-support, wall-attachment and object-support relations."""
    if poses is not None:
        scene = scene.with_poses(poses)
    rules = rules or RuleTable()
    out = []
    supports = {}
    K = len(scene.objects)
    for k in range(1, K + 1):
        ob = scene.objects[k - 1]
        flags = rules[ob.category]

        # downward: nearest supporting surface among floor and other objects
        best = None
        floor_probe = None
        for tgt in range(0, K + 1):
            if tgt == k or scene.field(tgt) is None:
                continue
            if tgt > 0:
                allowed = flags["may_support_on"]
                if allowed is not None and scene.objects[tgt - 1].category not in allowed:
                    continue
            pr = probe(scene, k, tgt, DOWN, config)
            if tgt == 0:
                floor_probe = pr
            if not pr.any_hit:
                continue
            med = float(np.median(pr.gaps))
            if best is None or med < best[1]:
                best = (tgt, med)
        if best is not None and best[1] < threshold:
            tgt, med = best
            if tgt == 0 and not flags["forbid_floor"]:
                out.append(Relation("floor_support", k, 0, DOWN, med))
            elif tgt > 0:
                supports[(k, tgt)] = Relation("object_support", k, tgt, DOWN, med)
        elif flags["must_attach_floor"] and floor_probe is not None and floor_probe.any_hit:
            out.append(Relation("floor_support", k, 0, DOWN, float(np.median(floor_probe.gaps))))

        # horizontal: attachment to walls, target surface must face the probe
        if scene.background is None:
            continue
        cands = []
        for d in _horizontal_dirs(ob.pose.R):
            pr = probe(scene, k, 0, d, config)
            if not pr.any_hit:
                continue
            facing = np.median(_unit(pr.n_tgt[pr.valid]) @ d) < -OPPOSITION_COS
            if facing:
                cands.append((float(np.median(pr.gaps)), d))
        near = [c for c in cands if c[0] < threshold]
        if not near and flags["must_attach_wall"] and cands:
            near = [min(cands, key=lambda c: c[0])]
        for med, d in near:
            out.append(Relation("wall_attach", k, 0, d, med))

    for (a, b), rel in sorted(supports.items()):
        rev = supports.get((b, a))
        if rev is not None and (abs(rev.distance), b) < (abs(rel.distance), a):
            continue
        out.append(rel)
    out.sort(key=lambda r: (r.subject, KINDS.index(r.kind), r.target))
    return out


def nearest_neighbors(scene, poses=None, k=3):
    """For each object: background (0) then up to ``k`` nearest objects by
    box-center distance, ties broken by index."""
    if poses is not None:
        scene = scene.with_poses(poses)
    centers = np.array([o.pose.to_world(o.local_bbox.center) for o in scene.objects]).reshape(-1, 3)
    out = []
    for i in range(len(centers)):
        dist = np.linalg.norm(centers - centers[i], axis=1)
        order = sorted((float(dist[j]), j) for j in range(len(centers)) if j != i)
        out.append([0] + [j + 1 for _, j in order[:k]])
    return out


def relations_to_json(relations, scene=None):
    return json.dumps([r.to_dict(scene) for r in relations], indent=2)
