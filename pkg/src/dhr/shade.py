"""Lambertian deferred shading with per-light visibility.

    radiance = albedo / pi * sum_i k_i * clamp(N . L_i, 0, 1) * I_i

Per-pixel light contributions are sorted before summation so the result is
exactly invariant under reordering of the light list.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShadeError(ValueError):
    pass


@dataclass(eq=False)
class ImageRgb8:
    width: int
    height: int
    pixels: np.ndarray  # (H, W, 3) uint8

    def __eq__(self, other):
        if not isinstance(other, ImageRgb8):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


def _light_dirs(lights, world_pos):
    """(n_lights, P, 3) unit vectors from each surface point toward each light."""
    out = np.empty((len(lights),) + world_pos.shape)
    for i, li in enumerate(lights):
        if li.kind == "point":
            d = np.asarray(li.position, dtype=np.float64) - world_pos
            length = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
            out[i] = d / np.where(length > 0, length, 1.0)[:, None]
        else:
            out[i] = -np.asarray(li.direction, dtype=np.float64)
    return out


def radiance(albedo, normal, world_pos, bits, lights):
    """Vectorized formula over P pixels; ``bits`` is (n_lights, P) boolean.

    Returns float64 linear RGB of shape (P, 3).
    """
    albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(normal, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(world_pos, dtype=np.float64).reshape(-1, 3)
    if len(lights) == 0:
        return np.zeros_like(albedo)
    L = _light_dirs(lights, w)
    ndl = L[..., 0] * n[:, 0] + L[..., 1] * n[:, 1] + L[..., 2] * n[:, 2]
    ndl = np.clip(ndl, 0.0, 1.0)
    intensity = np.array([li.intensity for li in lights], dtype=np.float64)
    k = np.asarray(bits, dtype=bool).reshape(len(lights), -1)
    contrib = np.where(k, ndl, 0.0)[:, :, None] * intensity[:, None, :]
    contrib = np.sort(contrib, axis=0)
    total = contrib[0].copy()
    for i in range(1, contrib.shape[0]):
        total += contrib[i]
    return (albedo / math.pi) * total


def shade_pixel(albedo, normal, world_pos, k, lights):
    """Linear RGB of a single surface point; bit i of ``k`` is light i's visibility."""
    if len(lights) > 64:
        raise ShadeError("at most 64 lights")
    bits = np.array([[(int(k) >> i) & 1] for i in range(len(lights))], dtype=bool).reshape(len(lights), 1)
    return radiance([albedo], [normal], [world_pos], bits, lights)[0]


def quantize(c):
    """Linear [0, 1] -> byte, rounding half away from zero; no gamma."""
    return np.floor(np.clip(c, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def shade_linear(gbuffer, vis, lights, background):
    """Pre-quantization radiance image (H, W, 3) float64."""
    if (gbuffer.width, gbuffer.height) != (vis.width, vis.height):
        raise ShadeError(
            f"G-buffer {gbuffer.width}x{gbuffer.height} does not match bitmap {vis.width}x{vis.height}"
        )
    if vis.n_lights != len(lights):
        raise ShadeError(f"bitmap has {vis.n_lights} lights, scene has {len(lights)}")
    h, w = gbuffer.height, gbuffer.width
    out = np.empty((h * w, 3))
    out[:] = np.asarray(background, dtype=np.float64)
    valid = gbuffer.valid.reshape(-1)
    pix = np.flatnonzero(valid)
    if pix.size:
        out[pix] = radiance(
            gbuffer.albedo.reshape(-1, 3)[pix],
            gbuffer.normal.reshape(-1, 3)[pix],
            gbuffer.world_pos.reshape(-1, 3)[pix],
            vis.bits()[:, pix],
            lights,
        )
    return out.reshape(h, w, 3)


def shade(gbuffer, vis, lights, background):
    """Combine a G-buffer and a visibility bitmap into an 8-bit image."""
    return ImageRgb8(gbuffer.width, gbuffer.height, quantize(shade_linear(gbuffer, vis, lights, background)))
