"""Swap the lighting of a scene for the irradiance of an environment map
and blend between two lighting conditions.

Run:  python3 demos/relight.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from nrroom.geometry import equirect_grid
from nrroom.io import write_image
from nrroom.lighting import interpolate_lighting, irradiance, project_envmap
from nrroom.render import RenderConfig, render_image
from nrroom.synth import SynthSpec, synth_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)
scene = synth_scene(SynthSpec(width=128, height=64, object_grid=48, room_grid=64), seed=1).scene

# %% a warm sky above, a dim cool floor below
dirs = equirect_grid(128, 64)
up = np.clip(dirs[..., 2:3], 0, 1)
env = up * np.array([1.6, 1.3, 0.9]) + (1 - up) * np.array([0.25, 0.3, 0.45])
sky = project_envmap(env)
for n in ([0, 0, 1], [1, 0, 0], [0, 0, -1]):
    print(f"irradiance at normal {n}: {np.round(irradiance(sky, np.array(n, float)), 3)}")

# %% render the blend from the scene's own lighting to the sky
base = scene.lighting
cfg = RenderConfig()
for t in (0.0, 0.5, 1.0):
    scene.lighting = interpolate_lighting(base, sky, t)
    img = render_image(scene, scene.camera, 128, 64, cfg)
    write_image(out / f"relit_{t:.1f}.png", np.clip(img.color, 0, 1))
    print(f"t = {t:.1f}  mean color {np.round(img.color.mean(axis=(0, 1)), 3)}")
