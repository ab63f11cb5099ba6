"""Command-line entry point: ``nrroom <command> ...``.

Exit status is 0 on success, 1 when an input fails validation (or a
gradient check disagrees) and 2 when optimization aborts numerically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, NonFiniteLoss, NrroomError, ValidationError
from .io import read_envmap, read_image, read_label_png, write_image
from .lighting import project_envmap
from .losses import TERMS
from .metrics import evaluate
from .optimize import OptimConfig, gradient_suite, holistic_optimize, write_trace
from .relations import RuleTable, relations_to_json
from .render import RenderConfig, instance_masks, render_image
from .scene import apply_poses, load_poses, load_scene, save_poses, save_scene
from .synth import SynthSpec, synth_scene, write_synth

log = logging.getLogger("nrroom")


def _render_config(args):
    return RenderConfig(sharpness=args.sharpness)


def cmd_render(args):
    scene = load_scene(args.scene)
    img = render_image(scene, scene.camera, args.width, args.height, _render_config(args),
                       args.mode)
    write_image(args.out, img.color)
    if args.count_queries:
        print(json.dumps({"queries": img.queries,
                          "per_pixel": img.queries / (args.width * args.height)}))
    return 0


def cmd_relight(args):
    scene = load_scene(args.scene)
    scene.lighting = project_envmap(read_envmap(args.envmap))
    img = render_image(scene, scene.camera, args.width, args.height, _render_config(args),
                       args.mode)
    write_image(args.out, img.color)
    return 0


def _load_masks(args, scene, observed):
    H, W = observed.shape[:2]
    path = Path(args.masks) if args.masks else Path(args.observed).with_name("masks.png")
    if path.exists():
        masks = read_label_png(path)
        if masks.shape != (H, W):
            raise ValidationError(f"masks {masks.shape} do not match observed {(H, W)}")
        return masks
    if args.masks:
        raise ValidationError(f"missing masks file {path}")
    log.info("no masks file; using masks rendered from the initial poses")
    return instance_masks(render_image(scene, scene.camera, W, H, RenderConfig()).weights)


def cmd_fit(args):
    scene = load_scene(args.scene)
    if args.init:
        poses = load_poses(args.init)
        unknown = set(poses) - {o.id for o in scene.objects}
        if unknown:
            raise ValidationError(f"init poses name unknown objects {sorted(unknown)}")
        scene = apply_poses(scene, poses)
    observed = read_image(args.observed)
    H, W = observed.shape[:2]
    if W != 2 * H and scene.camera.model == "equirect":
        raise ValidationError(f"observed panorama must be 2:1, got {W}x{H}")
    cfg = OptimConfig.load(args.config) if args.config else OptimConfig()
    rules = RuleTable.load(args.rules) if args.rules else None
    masks = _load_masks(args, scene, observed)
    res = holistic_optimize(scene, observed, masks, config=cfg, rules=rules)
    save_scene(res.scene, args.out, source_dir=Path(args.scene).parent)
    if args.poses_out:
        save_poses(args.poses_out, [o.id for o in res.scene.objects],
                   [o.pose for o in res.scene.objects])
    if args.trace:
        write_trace(args.trace, res.trace)
    if args.dump_relations:
        Path(args.dump_relations).write_text(relations_to_json(res.relations, res.scene))
    last = res.trace[-1] if res.trace else {}
    print(json.dumps({"steps": len(res.trace), "final": last}))
    return 0


def cmd_synth(args):
    spec = SynthSpec()
    if args.spec:
        spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text()))
    res = synth_scene(spec, args.seed)
    out = write_synth(res, args.out_dir, args.seed)
    print(json.dumps({"out_dir": str(out), "objects": [o.id for o in res.scene.objects]}))
    return 0


def cmd_gradcheck(args):
    scene = load_scene(args.scene)
    terms = TERMS if args.term == "all" else (args.term,)
    report = gradient_suite(scene, terms=terms, sharpness=args.sharpness, h=args.h,
                            tol=args.tol)
    ok = all(b["ok"] for blocks in report.values() for b in blocks.values())
    for term, blocks in report.items():
        for name, b in blocks.items():
            print(f"{term:4s} {name:7s} max_rel={b['max_rel']:.3e} max_abs={b['max_abs']:.3e} "
                  f"{'ok' if b['ok'] else 'FAIL'}")
    return 0 if ok else 1


def _poses_and_boxes(path):
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, list):
        return load_poses(path), None
    scene = load_scene(path)
    return {o.id: o.pose for o in scene.objects}, {o.id: o.local_bbox for o in scene.objects}


def cmd_eval(args):
    fitted, boxes_f = _poses_and_boxes(args.fitted)
    gt, boxes_g = _poses_and_boxes(args.gt)
    boxes = boxes_g or boxes_f
    if boxes is None:
        raise ValidationError("eval needs a scene file (for object boxes) on one side")
    report = evaluate(fitted, gt, boxes, method=args.iou)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="nrroom", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def view_args(sp):
        sp.add_argument("--width", type=int, default=320)
        sp.add_argument("--height", type=int, default=160)
        sp.add_argument("--mode", choices=("safe", "full"), default="safe")
        sp.add_argument("--sharpness", type=float, default=64.0)

    sp = sub.add_parser("render", help="render a scene to an image")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--count-queries", action="store_true")
    view_args(sp)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("fit", help="recover poses and appearance from a panorama")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--observed", required=True)
    sp.add_argument("--init")
    sp.add_argument("--config")
    sp.add_argument("--rules")
    sp.add_argument("--masks", help="instance label PNG (default: masks.png beside --observed)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--poses-out")
    sp.add_argument("--trace")
    sp.add_argument("--dump-relations", metavar="PATH")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("synth", help="generate a synthetic ground-truth scene")
    sp.add_argument("--spec")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("relight", help="render under an environment map's irradiance")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--envmap", required=True)
    sp.add_argument("--out", required=True)
    view_args(sp)
    sp.set_defaults(func=cmd_relight)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--term", choices=TERMS + ("all",), default="all")
    sp.add_argument("--sharpness", type=float, default=16.0)
    sp.add_argument("--h", type=float, default=1e-7)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("eval", help="score fitted poses against ground truth")
    sp.add_argument("--fitted", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out")
    sp.add_argument("--iou", choices=("voxel", "exact"), default="voxel")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # usage errors are validation failures; status 2 is kept for numerical aborts
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("NRROOM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NrroomError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
