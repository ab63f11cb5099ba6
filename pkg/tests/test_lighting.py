import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nrroom.errors import BadAspect
from nrroom.geometry import axis_angle_matrix, equirect_grid
from nrroom.io import read_envmap, write_envmap
from nrroom.lighting import (ShIrradiance, ToneAdjust, augment_image, interpolate_lighting,
                             irradiance, project_envmap, tone_apply, tone_invert)


def random_normals(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def envmap_from(fn, H=64):
    dirs = equirect_grid(2 * H, H)
    return fn(dirs)


def brute_irradiance(env, n):
    """Cosine-weighted radiance integral over the sphere, divided by pi."""
    H, W = env.shape[:2]
    dirs = equirect_grid(W, H).reshape(-1, 3)
    edges = np.pi / 2 - np.pi * np.arange(H + 1) / H
    omega = np.repeat((np.sin(edges[:-1]) - np.sin(edges[1:])) * 2 * np.pi / W, W)
    cos = np.maximum(np.asarray(n) @ dirs.T, 0.0)
    return (cos * omega) @ env.reshape(-1, env.shape[-1]) / np.pi


def test_uniform_envmap_gives_unit_irradiance():
    sh = project_envmap(np.ones((32, 64, 3)))
    E = irradiance(sh, random_normals(1000))
    assert np.max(np.abs(E - 1.0)) < 1e-3
    assert sh == ShIrradiance(sh.coeffs) and np.abs(sh.coeffs[1:]).max() < 1e-12


@pytest.mark.parametrize("v", [0.25, 3.0])
def test_constant_map_energy(v):
    sh = project_envmap(np.full((32, 64, 3), v))
    assert np.max(np.abs(irradiance(sh, random_normals(1000, 1)) - v)) < 1e-3


def test_upper_hemisphere_light():
    env = np.zeros((64, 128, 3))
    env[:32] = 1.0
    sh = project_envmap(env)
    up = irradiance(sh, np.array([0.0, 0.0, 1.0]))
    down = irradiance(sh, np.array([0.0, 0.0, -1.0]))
    side = irradiance(sh, np.array([1.0, 0.0, 0.0]))
    assert np.all(up > down)
    # closed form of the order-2 expansion: E(n) = (1 + n_z) / 2
    np.testing.assert_allclose(up, 1.0, atol=1e-12)
    np.testing.assert_allclose(down, 0.0, atol=1e-12)
    np.testing.assert_allclose(side, 0.5, atol=1e-12)
    n = random_normals(500, 11)
    np.testing.assert_allclose(irradiance(sh, n)[:, 0], (1 + n[:, 2]) / 2, atol=1e-12)


def test_single_bright_texel_peaks_at_its_direction():
    H, W = 32, 64
    env = np.zeros((H, W, 3))
    env[10, 40] = 50.0
    texel = equirect_grid(W, H)[10, 40]
    normals = random_normals(20_000, 2)
    normals = np.vstack([normals, texel])
    sh_E = irradiance(project_envmap(env), normals)[:, 0]
    brute = brute_irradiance(env, normals)[:, 0]
    # the brute-force integral peaks at the texel; so does the SH estimate
    assert np.argmax(brute) == len(normals) - 1
    assert np.argmax(sh_E) == len(normals) - 1


def test_band_limited_map_matches_brute_force():
    # radiance of SH band <= 2 is captured exactly by the 9 coefficients
    def fn(d):
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        return np.stack([1 + 0.5 * z, 1 + 0.3 * x * y, 0.6 + 0.2 * (3 * z * z - 1)], -1)

    env = envmap_from(fn, 128)
    n = random_normals(200, 3)
    ours = irradiance(project_envmap(env), n)
    brute = brute_irradiance(env, n)
    # the reference integrates at pixel centers, hence the loose tolerance
    np.testing.assert_allclose(ours, brute, atol=5e-3)
    # closed form for the first channel: E(n) = 1 + (2/3) * 0.5 * n_z
    np.testing.assert_allclose(ours[:, 0], 1 + n[:, 2] / 3, atol=1e-3)


def test_linearity():
    rng = np.random.default_rng(4)
    env = rng.uniform(0, 2, (16, 32, 3))
    a = project_envmap(env).coeffs
    for s in (0.0, 0.5, 7.0):
        np.testing.assert_allclose(project_envmap(s * env).coeffs, s * a, atol=1e-13 * np.abs(a).max())


def test_rotation_equivariance():
    def fn(d):
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        return np.stack([1.2 + 0.4 * x + 0.3 * y * z, 1 + 0.2 * z - 0.2 * x * x,
                         0.8 + 0.1 * y], -1)

    R = axis_angle_matrix((0.3, -0.5, 0.8), 0.7)
    env = envmap_from(fn, 96)
    rot = envmap_from(lambda d: fn(d @ R), 96)  # f(R^T w)
    n = random_normals(500, 5)
    np.testing.assert_allclose(irradiance(project_envmap(rot), n),
                               irradiance(project_envmap(env), n @ R), atol=1e-2)


def test_bad_aspect():
    with pytest.raises(BadAspect):
        project_envmap(np.ones((10, 10, 3)))
    with pytest.raises(ValueError):
        project_envmap(-np.ones((8, 16, 3)))


def test_augment_uniform_is_identity_and_linear():
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 1, (8, 16, 3))
    normals = random_normals(128, 7).reshape(8, 16, 3)
    np.testing.assert_array_equal(augment_image(img, normals, ShIrradiance.uniform()), img)
    sh = project_envmap(rng.uniform(0, 1, (16, 32, 3)))
    once = augment_image(img, normals, sh)
    np.testing.assert_allclose(augment_image(img, normals, sh.scaled(2.0)), 2 * once, rtol=1e-14)


def test_augment_sphere_under_hemisphere_light():
    H, W = 32, 32
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    r2 = xx ** 2 + yy ** 2
    inside = r2 < 1
    # orthographic sphere seen along -y: image up is +z
    normals = np.full((H, W, 3), np.nan)
    normals[inside] = np.stack([xx[inside], -np.sqrt(1 - r2[inside]), -yy[inside]], -1)
    img = np.full((H, W, 3), 0.5)
    env = np.zeros((32, 64, 3))
    env[:16] = 1.0
    sh = project_envmap(env)
    out = augment_image(img, normals, sh)
    ref = img.copy()
    for i in range(H):
        for j in range(W):
            if inside[i, j]:
                ref[i, j] = img[i, j] * irradiance(sh, normals[i, j])
    np.testing.assert_allclose(out, ref, rtol=1e-14)
    top = out[: H // 2][inside[: H // 2]].mean()
    bottom = out[H // 2:][inside[H // 2:]].mean()
    assert top > bottom
    # background pixels (invalid normals) pass through
    np.testing.assert_array_equal(out[~inside], img[~inside])


def test_tone_examples():
    c = np.array([0.5, 0.5, 0.5])
    np.testing.assert_array_equal(tone_apply(c, ToneAdjust.identity()), c)
    ta = ToneAdjust((0.1, 0.1, 0.1), (2, 2, 2))
    np.testing.assert_allclose(tone_apply(c, ta), 0.2, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 2), min_size=3, max_size=3),
       st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3),
       st.lists(st.floats(0.01, 5), min_size=3, max_size=3))
def test_tone_round_trip(c, t, s):
    ta = ToneAdjust(t, s)
    np.testing.assert_allclose(tone_invert(tone_apply(c, ta), ta), c, atol=1e-7)


def test_tone_scale_floor():
    with pytest.raises(ValueError):
        ToneAdjust((0, 0, 0), (1, 1e-3, 1))


def test_interpolation_endpoints_exact():
    rng = np.random.default_rng(8)
    a = ShIrradiance(rng.normal(size=27))
    b = ShIrradiance(rng.normal(size=27))
    assert interpolate_lighting(a, b, 0.0) == a
    assert interpolate_lighting(a, b, 1.0) == b
    np.testing.assert_allclose(interpolate_lighting(a, b, 0.25).coeffs,
                               0.75 * a.coeffs + 0.25 * b.coeffs, rtol=1e-15)
    with pytest.raises(ValueError):
        interpolate_lighting(a, b, 1.5)


def test_envmap_round_trip(tmp_path):
    env = np.random.default_rng(9).uniform(0, 4, (8, 16, 3)).astype(np.float32)
    write_envmap(tmp_path / "e.envm", env)
    np.testing.assert_array_equal(read_envmap(tmp_path / "e.envm"), env)
