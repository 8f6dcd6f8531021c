"""Analytic density fields and closed-form masks for verification scenes.

These stand in for trained layers in tests and toy fits: a solid sphere
(the "body") and a spherical shell band (the "garment"), with either hard
or sigmoid-smoothed walls. They satisfy the same callable protocol as
:class:`~layerwise.field.RadianceField`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .scene import AABB


def _step(d: torch.Tensor, softness: float) -> torch.Tensor:
    # 1 where d > 0; smooth ramp of width ~softness when softness > 0
    if softness > 0:
        return torch.sigmoid(d / softness)
    return (d >= 0).to(d.dtype)


@dataclass(frozen=True)
class Ball:
    radius: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def occupancy(self, x, softness):
        r = torch.linalg.norm(x - x.new_tensor(self.center), dim=-1)
        return _step(self.radius - r, softness)


@dataclass(frozen=True)
class ShellBand:
    """Spherical shell r_in <= |x| <= r_out, cut to y_min <= y <= y_max."""

    r_in: float
    r_out: float
    y_min: float = -np.inf
    y_max: float = np.inf
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def occupancy(self, x, softness):
        rel = x - x.new_tensor(self.center)
        r = torch.linalg.norm(rel, dim=-1)
        occ = _step(r - self.r_in, softness) * _step(self.r_out - r, softness)
        y = rel[:, 1]
        if np.isfinite(self.y_min):
            occ = occ * _step(y - self.y_min, softness)
        if np.isfinite(self.y_max):
            occ = occ * _step(self.y_max - y, softness)
        return occ


class AnalyticField(nn.Module):
    """Sum of constant-density parts, each with a (possibly varying) color.

    ``parts`` is a list of (shape, density, color); color is an RGB triple
    or the string "shaded", which tints by position so fits are not
    trivially flat. The density-weighted mean color is returned where
    parts overlap.
    """

    def __init__(self, parts, aabb: AABB, softness: float = 0.0, dtype=torch.float64):
        super().__init__()
        self.parts = list(parts)
        self.aabb = aabb
        self.softness = softness
        self._dtype = dtype
        self.register_buffer("box_min", torch.tensor(aabb.min, dtype=dtype), persistent=False)
        self.register_buffer("box_max", torch.tensor(aabb.max, dtype=dtype), persistent=False)

    @property
    def dtype(self):
        return self._dtype

    def _color(self, spec, x):
        if isinstance(spec, str) and spec == "shaded":
            return (0.5 + 0.35 * torch.tanh(2.0 * x)).clamp(0.0, 1.0)
        return x.new_tensor(spec).expand(x.shape[0], 3)

    def forward(self, x: torch.Tensor):
        x = x.to(self._dtype)
        inside = torch.all((x >= self.box_min) & (x <= self.box_max), dim=-1).to(x.dtype)
        sigma = x.new_zeros(x.shape[0])
        weighted = x.new_zeros(x.shape[0], 3)
        for shape, density, color in self.parts:
            s = density * shape.occupancy(x, self.softness) * inside
            sigma = sigma + s
            weighted = weighted + s[:, None] * self._color(color, x)
        color = torch.where(sigma[:, None] > 0, weighted / sigma.clamp_min(1e-300)[:, None],
                            torch.zeros_like(weighted))
        return sigma, color


def sphere_field(radius=0.5, density=60.0, color="shaded", softness=0.0, margin=0.05,
                 center=(0.0, 0.0, 0.0), dtype=torch.float64) -> AnalyticField:
    lo = tuple(c - radius - margin for c in center)
    hi = tuple(c + radius + margin for c in center)
    return AnalyticField([(Ball(radius, center), density, color)], AABB(lo, hi), softness, dtype)


def shell_field(r_in=0.55, r_out=0.65, y_min=-0.3, y_max=0.3, density=60.0,
                color=(0.85, 0.25, 0.2), softness=0.0, margin=0.05, leak=None,
                dtype=torch.float64) -> AnalyticField:
    """Garment band around the origin.

    ``leak`` = (radius, density, color) adds density inside a ball, i.e. an
    outer layer that wrongly fills the body interior.
    """
    parts = [(ShellBand(r_in, r_out, y_min, y_max), density, color)]
    if leak is not None:
        radius, leak_density, leak_color = leak
        parts.append((Ball(radius), leak_density, leak_color))
    y_lo = max(-r_out, y_min) - margin
    y_hi = min(r_out, y_max) + margin
    aabb = AABB((-r_out - margin, y_lo, -r_out - margin), (r_out + margin, y_hi, r_out + margin))
    return AnalyticField(parts, aabb, softness, dtype)


# --------------------------------------------------------------------------
# Closed-form ray geometry

def ray_sphere(origins, directions, radius, center=(0.0, 0.0, 0.0)):
    """Entry/exit distances of unit rays against a sphere; NaN where missed."""
    o = np.asarray(origins, dtype=np.float64) - np.asarray(center)
    d = np.asarray(directions, dtype=np.float64)
    b = np.sum(o * d, -1)
    c = np.sum(o * o, -1) - radius**2
    disc = b * b - c
    root = np.sqrt(np.where(disc >= 0, disc, np.nan))
    return -b - root, -b + root


def shell_band_mask(origins, directions, r_in, r_out, y_min, y_max, samples=2048):
    """True where a ray passes through the shell band (dense 1-D search per ray)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    t0, t1 = ray_sphere(o, d, r_out)
    hit = np.zeros(o.shape[0], dtype=bool)
    valid = np.isfinite(t0)
    if not np.any(valid):
        return hit
    ts = np.linspace(0.0, 1.0, samples)
    idx = np.nonzero(valid)[0]
    tt = t0[idx, None] + (t1[idx] - t0[idx])[:, None] * ts[None]
    pts = o[idx, None] + tt[..., None] * d[idx, None]
    r = np.linalg.norm(pts, axis=-1)
    inside = (r >= r_in) & (r <= r_out) & (pts[..., 1] >= y_min) & (pts[..., 1] <= y_max)
    hit[idx] = inside.any(-1)
    return hit
