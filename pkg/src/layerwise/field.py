"""Per-layer radiance field: multiresolution hash encoding feeding a small MLP.

Each layer maps a position to a density and an RGB color. Density is
forced to exactly zero outside the layer's axis-aligned box, so a field
never contributes (or receives gradient) outside its box.

Density uses a softplus activation. An exponential activation is the usual
alternative and trains faster, but its gradients are unbounded in the
density pre-activation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .scene import AABB

# Spatial hash primes; the first is 1 so the x axis stays coherent.
HASH_PRIMES = (1, 2654435761, 805459861)
HASH_INIT_RANGE = 1e-4
INITIAL_DENSITY = 0.1


@dataclass(frozen=True)
class GridSpec:
    levels: int = 16
    features: int = 2
    table_size: int = 2**14
    n_min: int = 16
    n_max: int = 512

    def resolutions(self) -> list[int]:
        if self.levels < 1:
            raise ValueError("hash grid needs at least one level")
        if self.levels == 1:
            return [self.n_min]
        growth = math.exp((math.log(self.n_max) - math.log(self.n_min)) / (self.levels - 1))
        return [int(math.floor(self.n_min * growth**l + 1e-9)) for l in range(self.levels)]

    def validate(self):
        if self.levels < 1:
            raise ValueError("hash grid needs at least one level")
        if self.features < 1:
            raise ValueError("hash grid needs at least one feature per level")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ValueError(f"table size must be a power of two, got {t}")
        res = self.resolutions()
        if res[0] < 1 or any(b <= a for a, b in zip(res, res[1:])):
            raise ValueError(f"level resolutions must be strictly increasing, got {res}")


@dataclass(frozen=True)
class MlpSpec:
    hidden: tuple[int, ...] = (64, 64, 64)


class Field(Protocol):
    """Anything the renderer can evaluate: positions (B, 3) -> (sigma (B,), rgb (B, 3))."""

    aabb: AABB

    def __call__(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]: ...


class HashGrid(nn.Module):
    def __init__(self, spec: GridSpec, dtype=torch.float32):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.register_buffer(
            "resolution", torch.tensor(spec.resolutions(), dtype=torch.int64), persistent=False
        )
        self.table = nn.Parameter(
            torch.zeros(spec.levels, spec.table_size, spec.features, dtype=dtype)
        )

    @property
    def output_dim(self) -> int:
        return self.spec.levels * self.spec.features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Encode normalized points x in [0, 1]^3, shape (B, 3) -> (B, L*F)."""
        levels, size = self.spec.levels, self.spec.table_size
        scaled = x[:, None, :] * self.resolution.to(x.dtype)[None, :, None]  # (B, L, 3)
        base = torch.floor(scaled)
        frac = scaled - base
        base = base.to(torch.int64)
        # hashed contribution of each axis for the lower (0) and upper (1) corner
        axis_terms = [
            [(base[..., a] + o) * HASH_PRIMES[a] for o in (0, 1)] for a in range(3)
        ]
        weights = [[1.0 - frac[..., a], frac[..., a]] for a in range(3)]
        offset = (torch.arange(levels, device=x.device) * size)[None, :]
        flat = self.table.reshape(levels * size, -1)
        out = 0.0
        for i in (0, 1):
            for j in (0, 1):
                hij = axis_terms[0][i] ^ axis_terms[1][j]
                wij = weights[0][i] * weights[1][j]
                for k in (0, 1):
                    index = ((hij ^ axis_terms[2][k]) & (size - 1)) + offset
                    out = out + (wij * weights[2][k])[..., None] * flat[index]
        return out.reshape(x.shape[0], -1)


def hash_encode(grid: HashGrid, x) -> torch.Tensor:
    """Encode points given in normalized box coordinates; rejects points outside [0, 1]^3."""
    x = torch.as_tensor(x, dtype=grid.table.dtype)
    if x.ndim == 1:
        x = x[None]
    if not torch.all((x >= 0) & (x <= 1)):
        raise ValueError("hash_encode expects points inside the unit cube")
    return grid(x)


class Mlp(nn.Module):
    """ReLU trunk with a 1-channel density head and a 3-channel color head."""

    def __init__(self, in_dim: int, spec: MlpSpec, dtype=torch.float32):
        super().__init__()
        dims = (in_dim,) + tuple(spec.hidden)
        self.trunk = nn.ModuleList(
            nn.Linear(a, b, dtype=dtype) for a, b in zip(dims[:-1], dims[1:])
        )
        self.density_head = nn.Linear(dims[-1], 1, dtype=dtype)
        self.color_head = nn.Linear(dims[-1], 3, dtype=dtype)

    def forward(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        for layer in self.trunk:
            h = torch.relu(layer(h))
        return self.density_head(h)[:, 0], self.color_head(h)


class RadianceField(nn.Module):
    def __init__(self, grid_spec: GridSpec, mlp_spec: MlpSpec, aabb: AABB, dtype=torch.float32):
        super().__init__()
        lo, hi = np.asarray(aabb.min), np.asarray(aabb.max)
        if not np.all(lo < hi):
            raise ValueError("aabb.min must be < aabb.max componentwise")
        self.aabb = aabb
        self.grid_spec, self.mlp_spec = grid_spec, mlp_spec
        self.grid = HashGrid(grid_spec, dtype)
        self.mlp = Mlp(self.grid.output_dim, mlp_spec, dtype)
        self.register_buffer("box_min", torch.tensor(lo, dtype=dtype), persistent=False)
        self.register_buffer("box_max", torch.tensor(hi, dtype=dtype), persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.grid.table.dtype

    def inside(self, x: torch.Tensor) -> torch.Tensor:
        return torch.all((x >= self.box_min) & (x <= self.box_max), dim=-1)

    def raw(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Pre-activation heads for points already known to be inside the box."""
        u = (x - self.box_min) / (self.box_max - self.box_min)
        return self.mlp(self.grid(u.clamp(0.0, 1.0)))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = x.to(self.dtype)
        sigma = x.new_zeros(x.shape[0])
        color = x.new_zeros(x.shape[0], 3)
        idx = torch.nonzero(self.inside(x), as_tuple=True)[0]
        if idx.numel():
            d_raw, c_raw = self.raw(x[idx])
            sigma = sigma.index_put((idx,), F.softplus(d_raw))
            color = color.index_put((idx,), torch.sigmoid(c_raw))
        return sigma, color


def _softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


def init_field(
    grid_spec: GridSpec = GridSpec(),
    mlp_spec: MlpSpec = MlpSpec(),
    aabb: AABB = AABB((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    seed: int = 0,
    dtype=torch.float32,
) -> RadianceField:
    """Fresh field with deterministic parameters for ``seed``.

    Hash entries are uniform in [-1e-4, 1e-4] and linear layers use
    fan-in-scaled uniform weights. The density-head bias is then calibrated
    on a probe of in-box points so the mean initial density is about 0.1.
    """
    field = RadianceField(grid_spec, mlp_spec, aabb, dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        field.grid.table.uniform_(-HASH_INIT_RANGE, HASH_INIT_RANGE, generator=gen)
        for layer in list(field.mlp.trunk) + [field.mlp.density_head, field.mlp.color_head]:
            bound = 1.0 / math.sqrt(layer.in_features)
            layer.weight.uniform_(-bound, bound, generator=gen)
            layer.bias.uniform_(-bound, bound, generator=gen)
        probe = torch.rand(256, 3, generator=gen, dtype=dtype)
        field.mlp.density_head.bias.zero_()
        d_raw, _ = field.mlp(field.grid(probe))
        shift = _softplus_inverse(INITIAL_DENSITY) - d_raw.mean().item()
        field.mlp.density_head.bias.fill_(shift)
    return field


@dataclass(frozen=True)
class FieldOutput:
    sigma: float
    color: np.ndarray


def field_eval(field: Field, x) -> FieldOutput:
    """Evaluate one point given in scene units."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(x)):
        raise ValueError("field_eval needs a finite point")
    with torch.no_grad():
        sigma, color = field(torch.as_tensor(x[None]))
    return FieldOutput(float(sigma[0]), color[0].double().numpy())


def field_eval_batch(field: Field, xs) -> list[FieldOutput]:
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(xs)):
        raise ValueError("field_eval_batch needs finite points")
    with torch.no_grad():
        sigma, color = field(torch.as_tensor(xs))
    return [FieldOutput(float(s), c.double().numpy()) for s, c in zip(sigma, color)]


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def named_parameters(modules: Sequence[nn.Module] | nn.Module) -> dict[str, torch.Tensor]:
    if isinstance(modules, nn.Module):
        modules = [modules]
    out = {}
    for i, m in enumerate(modules):
        for name, p in m.named_parameters():
            out[f"{i}.{name}" if len(modules) > 1 else name] = p
    return out
