"""Pose-recovery metrics: oriented-box IoU, rotation and position error."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection
from scipy.spatial import QhullError

from .errors import ValidationError
from .fields import Aabb
from .geometry import geodesic_angle


def _halfspaces(box: Aabb, pose):
    """Rows ``[n, c]`` with ``n.x + c <= 0`` describing the posed box."""
    R, p = pose.R, pose.p
    rows = []
    for axis in range(3):
        n = R[:, axis]
        # local coordinate along axis: n.(x - p) in [lo, hi]
        rows.append(np.concatenate([n, [-(n @ p) - box.max[axis]]]))
        rows.append(np.concatenate([-n, [(n @ p) + box.min[axis]]]))
    return np.array(rows)


def _box_volume(box: Aabb):
    return float(np.prod(box.extent))


def iou_exact(box_a: Aabb, pose_a, box_b: Aabb, pose_b):
    """Exact IoU (fraction) of two oriented boxes by convex-polytope clipping."""
    hs = np.vstack([_halfspaces(box_a, pose_a), _halfspaces(box_b, pose_b)])
    A, b = hs[:, :3], hs[:, 3]
    norms = np.linalg.norm(A, axis=1)
    # Chebyshev center: the deepest interior point, radius r > 0 iff overlap
    res = linprog(c=[0, 0, 0, -1], A_ub=np.hstack([A, norms[:, None]]), b_ub=-b,
                  bounds=[(None, None)] * 3 + [(0, None)], method="highs")
    if res.status != 0 or res.x[3] <= 1e-9:
        return 0.0
    try:
        inter = HalfspaceIntersection(hs, res.x[:3])
        vol = ConvexHull(inter.intersections).volume
    except QhullError:
        return 0.0
    union = _box_volume(box_a) + _box_volume(box_b) - vol
    return float(vol / union)


def iou_voxel(box_a: Aabb, pose_a, box_b: Aabb, pose_b, resolution=64):
    """IoU (fraction) from ``resolution``^3 voxel centers laid out in each
    box's own frame; the two overlap-volume estimates are averaged."""
    fr = (np.arange(resolution) + 0.5) / resolution

    def overlap(box, pose, other, other_pose):
        axes = [box.min[i] + fr * box.extent[i] for i in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        pts = pose.to_world(np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1))
        loc = other_pose.to_local(pts)
        inside = np.all((loc >= other.min) & (loc <= other.max), axis=1)
        return np.count_nonzero(inside) / inside.size * _box_volume(box)

    inter = 0.5 * (overlap(box_a, pose_a, box_b, pose_b) + overlap(box_b, pose_b, box_a, pose_a))
    union = _box_volume(box_a) + _box_volume(box_b) - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass
class ObjectScore:
    id: str
    iou: float   # percent
    are: float   # degrees
    ape: float   # centimeters


@dataclass
class EvalReport:
    objects: list = field(default_factory=list)
    method: str = "voxel"

    @property
    def mean_iou(self):
        return float(np.mean([o.iou for o in self.objects])) if self.objects else float("nan")

    @property
    def mean_are(self):
        return float(np.mean([o.are for o in self.objects])) if self.objects else float("nan")

    @property
    def mean_ape(self):
        return float(np.mean([o.ape for o in self.objects])) if self.objects else float("nan")

    def to_dict(self):
        return {
            "iou_method": self.method,
            "objects": [o.__dict__.copy() for o in self.objects],
            "mean": {"iou": self.mean_iou, "are": self.mean_are, "ape": self.mean_ape},
        }


def evaluate(fitted: dict, gt: dict, bboxes: dict, method="voxel", resolution=64) -> EvalReport:
    """Score fitted poses against ground truth.

    All three arguments map object id to a value: ``Pose`` for the first two
    and the object's local ``Aabb`` for ``bboxes``. IoU is reported in
    percent, ARE as the geodesic angle in degrees, APE in centimeters.
    ``method`` selects the IoU computation: ``"voxel"`` (default, 64^3 cell
    centers per box) or ``"exact"`` (polytope clipping).
    """
    if method not in ("voxel", "exact"):
        raise ValidationError(f"unknown IoU method {method!r}")
    missing = set(gt) - set(fitted)
    if missing:
        raise ValidationError(f"fitted poses missing ids {sorted(missing)}")
    report = EvalReport(method=method)
    for oid, pg in gt.items():
        if oid not in bboxes:
            raise ValidationError(f"no bounding box for {oid!r}")
        pf = fitted[oid]
        box = bboxes[oid]
        if method == "exact":
            iou = iou_exact(box, pf, box, pg)
        else:
            iou = iou_voxel(box, pf, box, pg, resolution)
        are = np.degrees(geodesic_angle(pf.R, pg.R))
        ape = 100.0 * float(np.linalg.norm(pf.p - pg.p))
        report.objects.append(ObjectScore(oid, 100.0 * min(max(iou, 0.0), 1.0),
                                          float(min(max(are, 0.0), 180.0)), ape))
    return report


def scene_bboxes(scene):
    return {o.id: o.local_bbox for o in scene.objects}
