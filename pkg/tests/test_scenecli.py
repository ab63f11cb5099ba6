import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import box_object, simple_scene
from nrroom.cli import main
from nrroom.errors import ValidationError
from nrroom.fields import Aabb
from nrroom.geometry import axis_angle_matrix, yaw_matrix
from nrroom.io import read_image, write_envmap, write_imgf
from nrroom.metrics import evaluate, iou_exact, iou_voxel
from nrroom.optimize import OptimConfig, holistic_optimize
from nrroom.render import RenderConfig, render_image
from nrroom.scene import (Pose, edit_scene, load_poses, load_scene, save_poses, save_scene,
                          scene_to_dict)
from nrroom.synth import SynthSpec, synth_scene, write_synth

TINY = dict(width=32, height=16, object_grid=24, room_grid=32)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = out / "spec.json"
    spec.write_text(json.dumps({"width": 64, "height": 32, "object_grid": 40, "room_grid": 48}))
    assert main(["synth", "--spec", str(spec), "--seed", "3", "--out-dir", str(out)]) == 0
    return out


def same_scene(a, b):
    assert scene_to_dict(a) == scene_to_dict(b)
    np.testing.assert_array_equal(a.background.sdf, b.background.sdf)
    for oa, ob in zip(a.objects, b.objects):
        np.testing.assert_array_equal(oa.field.sdf, ob.field.sdf)
        np.testing.assert_array_equal(oa.field.albedo, ob.field.albedo)
        np.testing.assert_array_equal(oa.field.bbox.min, ob.field.bbox.min)


# --- files ------------------------------------------------------------------------

def test_scene_round_trip(synth_dir):
    a = load_scene(synth_dir / "scene_gt.json")
    save_scene(a, synth_dir / "copy.json", source_dir=synth_dir)
    b = load_scene(synth_dir / "copy.json")
    (synth_dir / "copy.json").unlink()
    same_scene(a, b)


def test_scene_save_elsewhere_rewrites_paths(synth_dir, tmp_path):
    a = load_scene(synth_dir / "scene_gt.json")
    save_scene(a, tmp_path / "copy.json", source_dir=synth_dir)
    b = load_scene(tmp_path / "copy.json")
    np.testing.assert_array_equal(a.background.sdf, b.background.sdf)
    assert [o.id for o in a.objects] == [o.id for o in b.objects]


def test_scene_validation_errors(synth_dir, tmp_path):
    doc = json.loads((synth_dir / "scene_gt.json").read_text())
    doc["objects"][1]["id"] = doc["objects"][0]["id"]
    bad = synth_dir / "dup.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        load_scene(bad)
    doc = json.loads((synth_dir / "scene_gt.json").read_text())
    doc["objects"][0]["field"] = "nowhere.sdfg"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValidationError):
        load_scene(bad)
    bad.unlink()


def test_pose_file_round_trip(tmp_path):
    poses = [Pose.from_matrix(axis_angle_matrix((1, 2, 3), 0.7), (1, -2, 0.5)), Pose.identity()]
    save_poses(tmp_path / "p.json", ["a", "b"], poses)
    back = load_poses(tmp_path / "p.json")
    np.testing.assert_array_equal(back["a"].r6, poses[0].r6)
    np.testing.assert_array_equal(back["a"].p, poses[0].p)
    (tmp_path / "bad.json").write_text(json.dumps({"id": "a"}))
    with pytest.raises(ValidationError):
        load_poses(tmp_path / "bad.json")


# --- synthetic scenes ---------------------------------------------------------------

def test_synth_is_deterministic():
    a = synth_scene(SynthSpec(**TINY), 5)
    b = synth_scene(SynthSpec(**TINY), 5)
    np.testing.assert_array_equal(a.observed, b.observed)
    np.testing.assert_array_equal(a.masks, b.masks)
    for pa, pb in zip(a.init_poses + a.gt_poses, b.init_poses + b.gt_poses):
        np.testing.assert_array_equal(pa.r6, pb.r6)
        np.testing.assert_array_equal(pa.p, pb.p)
    same_scene_fields = [np.array_equal(x.field.sdf, y.field.sdf)
                         for x, y in zip(a.scene.objects, b.scene.objects)]
    assert all(same_scene_fields)


def test_synth_places_objects_on_the_floor():
    res = synth_scene(SynthSpec(**TINY), 1)
    for ob in res.scene.objects:
        lo = ob.world_bbox().min[2]
        # the baked box carries a small margin below its true bottom face
        assert -0.06 < lo < 0.0
        assert abs(ob.pose.R[2, 2] - 1.0) < 1e-12


def test_zero_perturbation_is_a_fixed_point():
    spec = SynthSpec(rot_noise_deg=0.0, trans_noise=0.0, width=64, height=32, object_grid=40,
                     room_grid=48)
    res = synth_scene(spec, 2)
    for a, b in zip(res.init_poses, res.gt_poses):
        np.testing.assert_array_equal(a.R, b.R)
        np.testing.assert_array_equal(a.p, b.p)
    cfg = OptimConfig(iterations=5, appearance_iterations=0, rays_per_step=256)
    fit = holistic_optimize(res.init_scene, res.observed, res.masks, config=cfg)
    assert fit.trace[0]["L_pho"] == 0.0
    # only grid discretization separates the contact surfaces at the truth
    assert fit.trace[0]["total"] < 1e-3
    # Adam's first steps have the size of the learning rate whatever the
    # gradient magnitude, so the fit wanders by about a centimeter, no more
    assert all(row["total"] < 1e-2 for row in fit.trace)
    report = evaluate({o.id: o.pose for o in fit.scene.objects},
                      {o.id: o.pose for o in res.scene.objects},
                      {o.id: o.local_bbox for o in res.scene.objects})
    assert report.mean_ape < 2.0 and report.mean_are < 1.0


def test_initial_error_matches_noise_settings():
    ape, are = [], []
    for seed in range(20):
        res = synth_scene(SynthSpec(width=16, height=8, object_grid=12, room_grid=16), seed)
        rep = evaluate(dict(zip(range(3), res.init_poses)), dict(zip(range(3), res.gt_poses)),
                       {i: o.local_bbox for i, o in enumerate(res.scene.objects)})
        ape += [o.ape for o in rep.objects]
        are += [o.are for o in rep.objects]
    # translation magnitude ~ U(0, 20 cm), yaw magnitude ~ |U(-15, 15)| degrees
    assert np.mean(ape) == pytest.approx(10.0, abs=2.5)
    assert max(ape) <= 20.0
    assert np.mean(are) == pytest.approx(7.5, abs=2.0)
    assert max(are) <= 15.0


# --- evaluation ------------------------------------------------------------------------

UNIT = Aabb((-0.5,) * 3, (0.5,) * 3)


@pytest.mark.parametrize("method", ["voxel", "exact"])
def test_eval_identical(method):
    p = Pose.from_matrix(yaw_matrix(0.3), (1, 2, 0.5))
    rep = evaluate({"a": p}, {"a": p}, {"a": UNIT}, method=method)
    assert rep.mean_iou == pytest.approx(100.0, abs=1e-9)
    assert rep.mean_are == 0.0 and rep.mean_ape == 0.0


@pytest.mark.parametrize("method", ["voxel", "exact"])
def test_eval_shifted_cube(method):
    rep = evaluate({"a": Pose.identity((0.5, 0, 0))}, {"a": Pose.identity()}, {"a": UNIT},
                   method=method)
    assert rep.mean_iou == pytest.approx(100 / 3, abs=1e-6)
    assert rep.mean_ape == pytest.approx(50.0)


def test_eval_yaw_error():
    rep = evaluate({"a": Pose.from_matrix(yaw_matrix(math.radians(10)), (0, 0, 0))},
                   {"a": Pose.identity()}, {"a": UNIT})
    assert rep.mean_are == pytest.approx(10.0, abs=0.01)
    assert rep.mean_ape == 0.0


def test_eval_missing_ids():
    with pytest.raises(ValidationError):
        evaluate({}, {"a": Pose.identity()}, {"a": UNIT})
    with pytest.raises(ValidationError):
        evaluate({"a": Pose.identity()}, {"a": Pose.identity()}, {"a": UNIT}, method="mc")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0, math.pi),
       st.lists(st.floats(-0.6, 0.6), min_size=3, max_size=3))
def test_iou_voxel_agrees_with_exact(axis, angle, shift):
    if np.linalg.norm(axis) < 1e-3:
        return
    box = Aabb((-0.5, -0.3, -0.2), (0.5, 0.3, 0.2))
    a = Pose.identity()
    b = Pose.from_matrix(axis_angle_matrix(axis, angle), shift)
    ex = iou_exact(box, a, box, b)
    vx = iou_voxel(box, a, box, b)
    assert 0.0 <= ex <= 1.0
    assert abs(ex - vx) <= 0.01
    assert iou_exact(box, b, box, a) == pytest.approx(ex, abs=1e-9)


# --- editing -----------------------------------------------------------------------------

def test_edit_insert_occludes():
    far = box_object("far", (2.0, 0, 1.4), (0.3, 0.3, 0.3), albedo=(0.9, 0.1, 0.1))
    scene = simple_scene([far])
    cfg = RenderConfig()
    before = render_image(scene, scene.camera, 64, 32, cfg)
    near = box_object("near", (1.0, 0, 1.4), (0.2, 0.4, 0.4), albedo=(0.1, 0.1, 0.9))
    edited = edit_scene(scene, insert=near)
    after = render_image(edited, edited.camera, 64, 32, cfg)
    row, col = 15, 32  # straight ahead along +x
    assert before.weights[row, col, 1] > 0.99
    assert after.weights[row, col, 1] < 0.01 and after.weights[row, col, 2] > 0.99
    assert len(scene.objects) == 1  # the original is untouched
    back = edit_scene(edited, remove="near")
    np.testing.assert_array_equal(render_image(back, back.camera, 64, 32, cfg).color,
                                  before.color)


def test_edit_move_and_errors():
    scene = simple_scene([box_object("a", (1.0, 0, 0.3), (0.2, 0.2, 0.2))])
    moved = edit_scene(scene, move=("a", Pose.identity((0, 1.0, 0.3))))
    np.testing.assert_array_equal(moved.objects[0].pose.p, (0, 1.0, 0.3))
    with pytest.raises(ValidationError):
        edit_scene(scene, remove="zzz")
    with pytest.raises(ValidationError):
        edit_scene(scene, insert=box_object("a", (0, 0, 0), (0.1, 0.1, 0.1)))


# --- command line -------------------------------------------------------------------------

def test_cli_render_counts_are_repeatable(synth_dir, tmp_path, capsys):
    args = ["render", "--scene", str(synth_dir / "scene_gt.json"), "--out",
            str(tmp_path / "a.png"), "--width", "32", "--height", "16", "--count-queries"]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(args) == 0
    second = json.loads(capsys.readouterr().out)
    assert first == second and first["queries"] > 0
    assert read_image(tmp_path / "a.png").shape == (16, 32, 3)


def test_cli_relight_uniform_equals_render(synth_dir, tmp_path):
    write_envmap(tmp_path / "white.envm", np.ones((16, 32, 3), dtype=np.float32))
    common = ["--scene", str(synth_dir / "scene_gt.json"), "--width", "64", "--height", "32"]
    assert main(["render", *common, "--out", str(tmp_path / "r.png")]) == 0
    assert main(["relight", *common, "--envmap", str(tmp_path / "white.envm"),
                 "--out", str(tmp_path / "l.png")]) == 0
    np.testing.assert_array_equal(read_image(tmp_path / "r.png"), read_image(tmp_path / "l.png"))


def test_cli_fit_and_eval(synth_dir, tmp_path, capsys):
    (tmp_path / "opt.json").write_text(json.dumps({"iterations": 4, "appearance_iterations": 2,
                                                   "rays_per_step": 128}))
    out = tmp_path / "fitted.json"
    args = ["fit", "--scene", str(synth_dir / "scene_init.json"),
            "--observed", str(synth_dir / "observed.png"),
            "--init", str(synth_dir / "init.json"), "--config", str(tmp_path / "opt.json"),
            "--out", str(out), "--trace", str(tmp_path / "trace.csv"),
            "--dump-relations", str(tmp_path / "rels.json")]
    assert main(args) == 0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,L_pho,L_obs,L_mag,L_vio,L_g,total" and len(lines) == 7
    assert isinstance(json.loads((tmp_path / "rels.json").read_text()), list)
    capsys.readouterr()
    assert main(["eval", "--fitted", str(out), "--gt", str(synth_dir / "scene_gt.json"),
                 "--out", str(tmp_path / "report.json")]) == 0
    capsys.readouterr()
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["objects"]) == 3 and rep["iou_method"] == "voxel"
    assert 0 <= rep["mean"]["iou"] <= 100
    # pose files work on the fitted side too
    assert main(["eval", "--fitted", str(synth_dir / "gt.json"),
                 "--gt", str(synth_dir / "scene_gt.json"), "--iou", "exact"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mean"]["iou"] == pytest.approx(100.0) and rep["mean"]["ape"] == 0.0


def test_cli_gradcheck(synth_dir, capsys):
    assert main(["gradcheck", "--scene", str(synth_dir / "scene_init.json"), "--term", "g"]) == 0
    out = capsys.readouterr().out
    assert "ok" in out and "FAIL" not in out


def test_cli_validation_failures_exit_1(synth_dir, tmp_path):
    assert main(["render", "--scene", str(tmp_path / "missing.json"), "--out",
                 str(tmp_path / "x.png")]) == 1
    assert main(["render", "--scene", str(synth_dir / "scene_gt.json")]) == 1  # no --out
    assert main(["frobnicate"]) == 1
    (tmp_path / "opt.json").write_text(json.dumps({"lambda_pho": -1}))
    assert main(["fit", "--scene", str(synth_dir / "scene_init.json"),
                 "--observed", str(synth_dir / "observed.png"),
                 "--config", str(tmp_path / "opt.json"), "--out", str(tmp_path / "f.json")]) == 1
    write_imgf(tmp_path / "square.imgf", np.zeros((8, 8, 3)))
    assert main(["fit", "--scene", str(synth_dir / "scene_init.json"),
                 "--observed", str(tmp_path / "square.imgf"), "--out",
                 str(tmp_path / "f.json")]) == 1


def test_cli_numerical_abort_exits_2(synth_dir, tmp_path):
    write_imgf(tmp_path / "nan.imgf", np.full((32, 64, 3), np.nan, dtype=np.float32))
    (tmp_path / "opt.json").write_text(json.dumps({"iterations": 2, "rays_per_step": 32}))
    assert main(["fit", "--scene", str(synth_dir / "scene_init.json"),
                 "--observed", str(tmp_path / "nan.imgf"),
                 "--masks", str(synth_dir / "masks.png"),
                 "--config", str(tmp_path / "opt.json"), "--out", str(tmp_path / "f.json")]) == 2


def test_write_synth_layout(tmp_path):
    res = synth_scene(SynthSpec(**TINY), 0)
    out = write_synth(res, tmp_path / "s", seed=0)
    names = {p.name for p in out.iterdir()}
    assert {"room.sdfg", "scene_gt.json", "scene_init.json", "gt.json", "init.json",
            "observed.png", "observed.imgf", "masks.png", "synth.json"} <= names
    same_scene(res.scene, load_scene(out / "scene_gt.json"))
