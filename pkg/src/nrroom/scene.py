"""Scene model, JSON scene files and compositional editing.

Field indices are shared by every module: index 0 is the room background,
index ``k >= 1`` is ``scene.objects[k - 1]``.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .errors import ValidationError
from .fields import DTYPE, Aabb, GridField, extract_bbox
from .geometry import (is_rotation, matrix_to_rot6d, quat_to_matrix, rot6d_to_matrix,
                       rot6d_to_matrix_torch)
from .io import read_grid, write_grid
from .lighting import ShIrradiance, ToneAdjust


@dataclass
class Pose:
    """Rigid object pose: 6D rotation and world-frame center ``p`` (m)."""

    r6: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.r6 = np.asarray(self.r6, dtype=np.float64).reshape(6)
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3)

    @property
    def R(self):
        return rot6d_to_matrix(self.r6)

    @classmethod
    def from_matrix(cls, R, p):
        return cls(matrix_to_rot6d(R), p)

    @classmethod
    def identity(cls, p=(0.0, 0.0, 0.0)):
        return cls(np.array([1.0, 0, 0, 0, 1, 0]), p)

    def to_local(self, x):
        return (np.asarray(x) - self.p) @ self.R

    def to_world(self, x):
        return np.asarray(x) @ self.R.T + self.p

    def copy(self):
        return Pose(self.r6.copy(), self.p.copy())


@dataclass
class ObjectInstance:
    id: str
    category: str
    field: object
    pose: Pose
    tone: ToneAdjust = field(default_factory=ToneAdjust)
    field_path: Optional[str] = None
    _bbox: Optional[Aabb] = field(default=None, repr=False)

    @property
    def local_bbox(self):
        """Extracted (tight, one-voxel padded) box in the object frame."""
        if self._bbox is None:
            if isinstance(self.field, GridField):
                self._bbox = extract_bbox(self.field)
            else:
                self._bbox = self.field.bbox
        return self._bbox

    @property
    def domain(self):
        """Box outside which the field contributes nothing; used for culling."""
        return self.field.bbox

    def world_bbox(self):
        return self.domain.transformed(self.pose.R, self.pose.p)


@dataclass
class Camera:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    model: str = "equirect"
    fov_deg: float = 90.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        if self.model not in ("equirect", "pinhole"):
            raise ValidationError(f"unknown camera model {self.model!r}")
        if not is_rotation(self.R, 1e-6):
            raise ValidationError("camera orientation is not a rotation")


@dataclass
class Scene:
    background: Optional[object] = None
    objects: List[ObjectInstance] = field(default_factory=list)
    lighting: ShIrradiance = field(default_factory=ShIrradiance.uniform)
    camera: Camera = field(default_factory=Camera)
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    background_tone: ToneAdjust = field(default_factory=ToneAdjust)
    background_path: Optional[str] = None

    @property
    def num_fields(self):
        return 1 + len(self.objects)

    def field(self, k):
        return self.background if k == 0 else self.objects[k - 1].field

    def index_of(self, obj_id):
        for i, ob in enumerate(self.objects):
            if ob.id == obj_id:
                return i + 1
        raise KeyError(obj_id)

    def poses(self):
        return [ob.pose.copy() for ob in self.objects]

    def with_poses(self, poses):
        out = self.copy()
        for ob, pose in zip(out.objects, poses):
            ob.pose = pose.copy()
        return out

    def copy(self):
        """Copy of all mutable state; fields are shared (they are immutable)."""
        objs = [ObjectInstance(o.id, o.category, o.field, o.pose.copy(),
                               ToneAdjust(o.tone.t.copy(), o.tone.s.copy()),
                               o.field_path, o._bbox) for o in self.objects]
        return Scene(self.background, objs, ShIrradiance(self.lighting.coeffs.copy()),
                     copy.deepcopy(self.camera), self.gravity.copy(),
                     ToneAdjust(self.background_tone.t.copy(), self.background_tone.s.copy()),
                     self.background_path)

    def validate(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValidationError("object ids must be unique")
        for o in self.objects:
            if not np.all(np.isfinite(o.pose.p)):
                raise ValidationError(f"object {o.id}: non-finite position")
            try:
                o.pose.R
            except Exception as exc:
                raise ValidationError(f"object {o.id}: {exc}") from exc
        if self.background is None and not self.objects:
            return self
        return self


# ---------------------------------------------------------------------------
# Differentiable view
# ---------------------------------------------------------------------------

class SceneState:
    """Torch tensors for every optimizable quantity of a scene.

    Tone tensors are indexed by field (row 0 is the background).
    """

    def __init__(self, scene: Scene, requires_grad=False):
        self.scene = scene
        self.fields = [scene.background] + [o.field for o in scene.objects]
        K = len(scene.objects)
        r6 = np.array([o.pose.r6 for o in scene.objects]).reshape(K, 6)
        p = np.array([o.pose.p for o in scene.objects]).reshape(K, 3)
        tones = [scene.background_tone] + [o.tone for o in scene.objects]
        self.r6 = torch.tensor(r6, dtype=DTYPE, requires_grad=requires_grad)
        self.p = torch.tensor(p, dtype=DTYPE, requires_grad=requires_grad)
        self.tone_t = torch.tensor(np.array([t.t for t in tones]), dtype=DTYPE,
                                   requires_grad=requires_grad)
        self.tone_s = torch.tensor(np.array([t.s for t in tones]), dtype=DTYPE,
                                   requires_grad=requires_grad)
        self.sh = torch.tensor(scene.lighting.coeffs, dtype=DTYPE, requires_grad=requires_grad)
        self.gravity = torch.tensor(scene.gravity, dtype=DTYPE)
        self._cache = None

    @property
    def num_objects(self):
        return self.r6.shape[0]

    def parameters(self):
        return {"r6": self.r6, "p": self.p, "tone_t": self.tone_t,
                "tone_s": self.tone_s, "sh": self.sh}

    def rotations(self):
        """Per-field rotations ``(F, 3, 3)``; background is the identity."""
        eye = torch.eye(3, dtype=DTYPE)[None]
        if self.num_objects == 0:
            return eye
        return torch.cat([eye, rot6d_to_matrix_torch(self.r6)], dim=0)

    def translations(self):
        return torch.cat([torch.zeros(1, 3, dtype=DTYPE), self.p], dim=0)

    def frames(self):
        """``(R, p)`` tensors, computed once per forward pass."""
        grad = torch.is_grad_enabled()
        # a cache filled under no_grad carries no graph and cannot be reused
        if self._cache is None or (grad and not self._cache[2]):
            self._cache = (self.rotations(), self.translations(), grad)
        return self._cache[:2]

    def invalidate(self):
        self._cache = None

    def detached_frames(self):
        with torch.no_grad():
            R = self.rotations().numpy().copy()
            p = self.translations().numpy().copy()
        return R, p

    def culling_boxes(self):
        """World AABB per field (``None`` for the unbounded background)."""
        R, p = self.detached_frames()
        boxes = []
        for k, f in enumerate(self.fields):
            if f is None:
                boxes.append(False)
            elif k == 0:
                boxes.append(None)
            else:
                boxes.append(f.bbox.transformed(R[k], p[k]))
        return boxes

    def to_scene(self):
        out = self.scene.copy()
        with torch.no_grad():
            for i, ob in enumerate(out.objects):
                ob.pose = Pose(self.r6[i].numpy().copy(), self.p[i].numpy().copy())
                ob.tone = ToneAdjust(self.tone_t[i + 1].numpy().copy(),
                                     self.tone_s[i + 1].clamp(min=1.001e-3).numpy().copy())
            out.background_tone = ToneAdjust(self.tone_t[0].numpy().copy(),
                                             self.tone_s[0].clamp(min=1.001e-3).numpy().copy())
            out.lighting = ShIrradiance(self.sh.numpy().copy())
        return out


# ---------------------------------------------------------------------------
# JSON files
# ---------------------------------------------------------------------------

def _rel(path, base):
    return os.path.relpath(path, base)


def _camera_from_dict(d):
    if d is None:
        return Camera()
    if "r6" in d:
        R = rot6d_to_matrix(d["r6"])
    elif "quaternion" in d:
        R = quat_to_matrix(d["quaternion"])
    else:
        R = np.eye(3)
    model = d.get("model", "equirect")
    fov = 90.0
    if isinstance(model, dict):
        fov = float(model.get("fov", 90.0))
        model = model.get("type", "pinhole")
    return Camera(d.get("position", [0, 0, 0]), R, model, float(d.get("fov", fov)))


def pose_to_dict(pose: Pose):
    return {"r6": pose.r6.tolist(), "p": pose.p.tolist()}


def load_scene(path) -> Scene:
    """Parse a scene JSON file; field paths are relative to its directory."""
    path = Path(path)
    base = path.parent
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read scene {path}: {exc}") from exc
    cache = {}

    def grid(rel):
        full = (base / rel).resolve()
        if not full.exists():
            raise ValidationError(f"missing field file {full}")
        if full not in cache:
            cache[full] = read_grid(full)
        return cache[full]

    bg = doc.get("background")
    background, bg_tone, bg_path = None, ToneAdjust(), None
    if bg:
        if isinstance(bg, str):
            bg = {"field": bg}
        bg_path = bg["field"]
        background = grid(bg_path)
        bg_tone = ToneAdjust.from_dict(bg.get("tone", {}))
    objects = []
    for od in doc.get("objects", []):
        try:
            pose = Pose(od["pose"]["r6"], od["pose"]["p"])
            objects.append(ObjectInstance(str(od["id"]), od.get("category", "object"),
                                          grid(od["field"]), pose,
                                          ToneAdjust.from_dict(od.get("tone", {})), od["field"]))
        except KeyError as exc:
            raise ValidationError(f"object entry missing key {exc}") from exc
    lighting = doc.get("lighting")
    scene = Scene(
        background=background,
        objects=objects,
        lighting=ShIrradiance(lighting) if lighting is not None else ShIrradiance.uniform(),
        camera=_camera_from_dict(doc.get("camera")),
        gravity=np.asarray(doc.get("gravity", [0, 0, 1]), dtype=np.float64),
        background_tone=bg_tone,
        background_path=bg_path,
    )
    return scene.validate()


def scene_to_dict(scene: Scene):
    cam = scene.camera
    camera = {"position": cam.position.tolist(), "r6": matrix_to_rot6d(cam.R).tolist(),
              "model": cam.model}
    if cam.model == "pinhole":
        camera["fov"] = cam.fov_deg
    doc = {
        "background": None if scene.background is None else
        {"field": scene.background_path, "tone": scene.background_tone.to_dict()},
        "objects": [{"id": o.id, "category": o.category, "field": o.field_path,
                     "pose": pose_to_dict(o.pose), "tone": o.tone.to_dict()}
                    for o in scene.objects],
        "lighting": scene.lighting.to_list(),
        "camera": camera,
        "gravity": scene.gravity.tolist(),
    }
    return doc


def save_scene(scene: Scene, path, write_fields=False, source_dir=None):
    """Write ``scene`` as JSON. With ``write_fields`` grids lacking a path are
    written next to the scene file. ``source_dir`` is the directory the
    existing field paths are relative to (when it differs from the target's)."""
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    if source_dir is not None and Path(source_dir).resolve() != base.resolve():
        scene = scene.copy()
        src = Path(source_dir)
        if scene.background_path is not None:
            scene.background_path = _rel((src / scene.background_path).resolve(), base.resolve())
        for o in scene.objects:
            if o.field_path is not None:
                o.field_path = _rel((src / o.field_path).resolve(), base.resolve())
    if write_fields:
        if scene.background is not None and scene.background_path is None:
            scene.background_path = "background.sdfg"
        if scene.background is not None and not (base / scene.background_path).exists():
            write_grid(base / scene.background_path, scene.background)
        for o in scene.objects:
            if o.field_path is None:
                o.field_path = f"{o.id}.sdfg"
            if not (base / o.field_path).exists():
                write_grid(base / o.field_path, o.field)
    missing = [o.id for o in scene.objects if o.field_path is None]
    if missing or (scene.background is not None and scene.background_path is None):
        raise ValidationError(f"fields without file paths: {missing or ['background']}")
    path.write_text(json.dumps(scene_to_dict(scene), indent=2))


def load_poses(path):
    """Pose file: JSON array of ``{id, r6, p}``. Returns ``{id: Pose}``."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValidationError("pose file must hold a JSON array")
    out = {}
    for d in doc:
        try:
            out[str(d["id"])] = Pose(d["r6"], d["p"])
        except KeyError as exc:
            raise ValidationError(f"pose entry missing {exc}") from exc
    return out


def save_poses(path, ids, poses):
    doc = [{"id": i, **pose_to_dict(p)} for i, p in zip(ids, poses)]
    Path(path).write_text(json.dumps(doc, indent=2))


def apply_poses(scene: Scene, poses: dict) -> Scene:
    out = scene.copy()
    for ob in out.objects:
        if ob.id in poses:
            ob.pose = poses[ob.id].copy()
    return out


# ---------------------------------------------------------------------------
# Editing
# ---------------------------------------------------------------------------

def edit_scene(scene: Scene, insert: ObjectInstance = None, remove: str = None,
               move: tuple = None) -> Scene:
    """Return an edited copy: insert an object, remove one by id, or move one
    (``move=(id, Pose)``)."""
    out = scene.copy()
    if insert is not None:
        if any(o.id == insert.id for o in out.objects):
            raise ValidationError(f"object id {insert.id!r} already present")
        out.objects.append(insert)
    if remove is not None:
        keep = [o for o in out.objects if o.id != remove]
        if len(keep) == len(out.objects):
            raise ValidationError(f"no object with id {remove!r}")
        out.objects = keep
    if move is not None:
        obj_id, pose = move
        out.objects[out.index_of(obj_id) - 1].pose = pose.copy()
    return out.validate()
