import numpy as np
import pytest

from nrroom.fields import Aabb, AnalyticField, bake_grid
from nrroom.geometry import yaw_matrix
from nrroom.lighting import ShIrradiance
from nrroom.scene import Camera, ObjectInstance, Pose, Scene
from nrroom.synth import SynthSpec, synth_scene

ROOM_HALF = (2.5, 2.0, 1.4)


def room_field(half=ROOM_HALF, albedo=(0.7, 0.7, 0.7)):
    # floor at z = 0
    return AnalyticField.room_shell((0.0, 0.0, half[2]), half, albedo)


def box_object(oid, center, half, category="box", yaw=0.0, albedo=(0.6, 0.4, 0.3)):
    fld = AnalyticField.box((0.0, 0.0, 0.0), half, albedo)
    return ObjectInstance(oid, category, fld, Pose.from_matrix(yaw_matrix(yaw), center))


def grid_box_object(oid, center, half, category="box", yaw=0.0, dims=40, albedo=(0.6, 0.4, 0.3)):
    half = np.asarray(half, dtype=float)
    box = Aabb(-half - 0.08, half + 0.08)
    fld = bake_grid(AnalyticField.box((0, 0, 0), half, albedo), (dims,) * 3, box)
    return ObjectInstance(oid, category, fld, Pose.from_matrix(yaw_matrix(yaw), center))


def simple_scene(objects=(), background=True, camera_height=1.4):
    return Scene(room_field() if background else None, list(objects), ShIrradiance.uniform(),
                 Camera(position=(0.0, 0.0, camera_height)))


@pytest.fixture(scope="session")
def small_synth():
    """A quick synthetic scene: coarse grids, low-resolution panorama."""
    spec = SynthSpec(width=64, height=32, object_grid=40, room_grid=48)
    return synth_scene(spec, 0)


@pytest.fixture(scope="session")
def standard_synth():
    """Seed 0 of the default synthetic setup (320x160)."""
    return synth_scene(SynthSpec(), 0)
