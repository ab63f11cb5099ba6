"""Diffuse lighting with order-2 spherical harmonics, image relighting and
the per-object tone adjuster.

Irradiance coefficients are stored already cosine-convolved and divided by
pi, so a constant environment of radiance 1 evaluates to exactly 1 in every
direction and lighting values act as unitless gains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import BadAspect

# Real SH normalization constants, band 0..2.
_K0 = 0.5 * np.sqrt(1.0 / np.pi)
_K1 = np.sqrt(3.0 / (4.0 * np.pi))
_K2a = 0.5 * np.sqrt(15.0 / np.pi)
_K2b = 0.25 * np.sqrt(5.0 / np.pi)
_K2c = 0.25 * np.sqrt(15.0 / np.pi)

# Clamped-cosine convolution per band (pi, 2pi/3, pi/4), divided by pi.
CONV = np.array([1.0, 2 / 3, 2 / 3, 2 / 3, 0.25, 0.25, 0.25, 0.25, 0.25])


def sh_basis(n):
    """The 9 real SH basis functions at unit directions ``(..., 3)``."""
    n = np.asarray(n, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, _K0),
        _K1 * y, _K1 * z, _K1 * x,
        _K2a * x * y, _K2a * y * z, _K2b * (3 * z * z - 1), _K2a * x * z, _K2c * (x * x - y * y),
    ], axis=-1)


def sh_basis_torch(n):
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return torch.stack([
        torch.full_like(x, _K0),
        _K1 * y, _K1 * z, _K1 * x,
        _K2a * x * y, _K2a * y * z, _K2b * (3 * z * z - 1), _K2a * x * z, _K2c * (x * x - y * y),
    ], dim=-1)


@dataclass
class ShIrradiance:
    """Nine convolved SH coefficients per color channel, shape ``(9, 3)``."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.size != 27:
            raise ValueError("SH irradiance needs 27 coefficients")
        c = c.reshape(9, 3)
        if not np.all(np.isfinite(c)):
            raise ValueError("SH coefficients must be finite")
        self.coeffs = c

    @classmethod
    def uniform(cls, value=1.0):
        """Constant irradiance ``value`` (scalar or RGB) in every direction."""
        c = np.zeros((9, 3))
        c[0] = np.broadcast_to(np.asarray(value, dtype=np.float64), 3) / _K0
        return cls(c)

    def to_list(self):
        return self.coeffs.reshape(-1).tolist()

    def scaled(self, a):
        return ShIrradiance(self.coeffs * a)

    def __eq__(self, other):
        return isinstance(other, ShIrradiance) and np.array_equal(self.coeffs, other.coeffs)


def project_envmap(envmap) -> ShIrradiance:
    """Project an equirectangular radiance map onto convolved SH irradiance.

    Each pixel is treated as constant radiance over its patch of the sphere
    and the basis functions are integrated exactly over that patch.
    """
    env = np.asarray(envmap, dtype=np.float64)
    if env.ndim == 2:
        env = env[..., None]
    H, W = env.shape[:2]
    if W != 2 * H:
        raise BadAspect(f"equirectangular map must be 2:1, got {W}x{H}")
    if np.any(env < 0):
        raise ValueError("environment radiance must be non-negative")
    if env.shape[2] == 1:
        env = np.repeat(env, 3, axis=2)
    env = env[..., :3]
    L = np.einsum("hwk,hwc->kc", _cell_integrals(W, H), env)
    return ShIrradiance(L * CONV[:, None])


def _cell_integrals(W, H):
    """Exact integral of each SH basis function over every pixel's patch of
    the sphere, ``(H, W, 9)``.

    With ``z = sin(latitude)`` the solid angle element is ``dz dphi`` and each
    basis function factors into a polynomial in ``z`` (times powers of
    ``sqrt(1 - z^2)``) and a trigonometric term in ``phi``.
    """
    z = np.sin(np.pi / 2.0 - np.pi * np.arange(H + 1) / H)
    phi = 2.0 * np.pi * np.arange(W + 1) / W - np.pi

    def zint(F):  # integral over each row, top edge to bottom edge
        v = F(z)
        return v[:-1] - v[1:]

    def pint(F):
        v = F(phi)
        return v[1:] - v[:-1]

    def r(t):
        return np.sqrt(np.clip(1.0 - t * t, 0.0, None))

    Z1 = zint(lambda t: t)
    Zs = zint(lambda t: 0.5 * (t * r(t) + np.arcsin(t)))       # sqrt(1-z^2)
    Zz = zint(lambda t: 0.5 * t * t)                            # z
    Zq = zint(lambda t: t - t ** 3 / 3.0)                       # 1 - z^2
    Zzs = zint(lambda t: -(r(t) ** 3) / 3.0)                    # z sqrt(1-z^2)
    Z3 = zint(lambda t: t ** 3 - t)                             # 3z^2 - 1
    P1 = pint(lambda t: t)
    Pc = pint(np.sin)                                           # cos
    Ps = pint(lambda t: -np.cos(t))                             # sin
    Psc = pint(lambda t: 0.5 * np.sin(t) ** 2)                  # sin cos
    Pc2 = pint(lambda t: 0.5 * np.sin(2.0 * t))                 # cos 2phi
    o = np.outer
    return np.stack([
        _K0 * o(Z1, P1),
        _K1 * o(Zs, Ps), _K1 * o(Zz, P1), _K1 * o(Zs, Pc),
        _K2a * o(Zq, Psc), _K2a * o(Zzs, Ps), _K2b * o(Z3, P1), _K2a * o(Zzs, Pc),
        _K2c * o(Zq, Pc2),
    ], axis=-1)


def irradiance(sh: ShIrradiance, n):
    """RGB irradiance gain at unit normal(s) ``n``, clamped at 0."""
    return np.maximum(sh_basis(n) @ sh.coeffs, 0.0)


def irradiance_torch(coeffs, n):
    return (sh_basis_torch(n) @ coeffs).clamp(min=0.0)


def augment_image(image, normals, sh: ShIrradiance):
    """Multiply each pixel by the irradiance of its world normal.

    Pixels whose normal is non-finite or near zero are passed through.
    """
    image = np.asarray(image, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if image.shape[:2] != normals.shape[:2]:
        raise ValueError("image and normal map differ in size")
    norm = np.linalg.norm(np.nan_to_num(normals), axis=-1)
    valid = np.all(np.isfinite(normals), axis=-1) & (norm > 1e-6)
    out = image.copy()
    n = normals[valid] / norm[valid][:, None]
    out[valid] = image[valid] * irradiance(sh, n)
    return out


def interpolate_lighting(sh_a: ShIrradiance, sh_b: ShIrradiance, t: float) -> ShIrradiance:
    if not 0.0 <= t <= 1.0:
        raise ValueError("interpolation parameter must lie in [0, 1]")
    if t == 0.0:
        return ShIrradiance(sh_a.coeffs.copy())
    if t == 1.0:
        return ShIrradiance(sh_b.coeffs.copy())
    return ShIrradiance((1.0 - t) * sh_a.coeffs + t * sh_b.coeffs)


# ---------------------------------------------------------------------------
# Tone adjuster
# ---------------------------------------------------------------------------

S_MIN = 1e-3


@dataclass
class ToneAdjust:
    """Affine color correction ``(c - t) / s`` per channel."""

    t: np.ndarray = None
    s: np.ndarray = None

    def __post_init__(self):
        self.t = np.zeros(3) if self.t is None else np.asarray(self.t, dtype=np.float64).reshape(3)
        self.s = np.ones(3) if self.s is None else np.asarray(self.s, dtype=np.float64).reshape(3)
        if np.any(self.s <= S_MIN):
            raise ValueError(f"tone scale must exceed {S_MIN}")

    @classmethod
    def identity(cls):
        return cls()

    def to_dict(self):
        return {"t": self.t.tolist(), "s": self.s.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("t"), d.get("s"))

    def __eq__(self, other):
        return (isinstance(other, ToneAdjust) and np.array_equal(self.t, other.t)
                and np.array_equal(self.s, other.s))


def tone_apply(c, ta: ToneAdjust):
    """Raw ``(c - t) / s``; clamping happens only when an image is written."""
    return (np.asarray(c, dtype=np.float64) - ta.t) / ta.s


def tone_invert(c, ta: ToneAdjust):
    return np.asarray(c, dtype=np.float64) * ta.s + ta.t
