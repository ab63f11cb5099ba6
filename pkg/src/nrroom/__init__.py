"""Posed SDF scene rendering and holistic pose / lighting recovery from a
single panorama."""

from .errors import (BadAspect, DegenerateGradient, DegenerateRotation, EmptyField,
                     FormatError, NoAlbedo, NonFiniteLoss, NrroomError, ValidationError)
from .fields import (Aabb, AnalyticField, GridField, albedo_eval, bake_grid, count_queries,
                     extract_bbox, normal, sdf_eval, sdf_grad)
from .geometry import rot6d_to_matrix
from .lighting import (ShIrradiance, ToneAdjust, augment_image, interpolate_lighting,
                       irradiance, project_envmap, tone_apply, tone_invert)
from .render import (Ray, RenderConfig, RenderOutput, alpha_from_sdf, equirect_ray,
                     query_count, render_image, render_ray, sample_safe_region, sphere_trace)
from .scene import Camera, ObjectInstance, Pose, Scene, edit_scene, load_scene, save_scene

__version__ = "0.1.0"
