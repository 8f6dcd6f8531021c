"""Non-rigid deformation of a trained garment for transfer onto another body.

The garment's radiance field stays frozen; a small MLP predicts a bounded
per-point offset and the garment is evaluated at ``x + offset(x)``. The
offset network is optimized with the same dual cloth loss used to create
the garment.
"""

from __future__ import annotations

import math
import time
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .errors import LayerwiseError, TrainingError
from .guidance import GuidanceProvider
from .losses import cloth_loss_step
from .scene import AABB, SceneConfig, project_skeleton, sample_camera
from .train import OptimizerState, StepRecord, adam_step


class DeformationField(nn.Module):
    """Positional encoding -> ReLU MLP -> tanh-bounded offset.

    The output layer starts at zero, so a fresh field is the identity map.
    """

    def __init__(self, n_freqs: int = 8, hidden: Sequence[int] = (64, 64, 64, 64),
                 max_offset: float = 0.15, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.n_freqs = n_freqs
        self.hidden = tuple(hidden)
        self.max_offset = float(max_offset)
        dims = (3 + 6 * n_freqs,) + self.hidden
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=dtype) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 3, dtype=dtype)
        self.register_buffer("freqs", (2.0 ** torch.arange(n_freqs, dtype=dtype)) * math.pi,
                             persistent=False)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)
            self.out.weight.zero_()
            self.out.bias.zero_()

    @property
    def dtype(self):
        return self.out.weight.dtype

    def encode(self, x):
        scaled = x[:, None, :] * self.freqs[None, :, None]
        return torch.cat([x, torch.sin(scaled).flatten(1), torch.cos(scaled).flatten(1)], -1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encode(x.to(self.dtype))
        for layer in self.layers:
            h = torch.relu(layer(h))
        return self.max_offset * torch.tanh(self.out(h))


def deform_eval(deform: DeformationField, x) -> np.ndarray:
    x = torch.as_tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3), dtype=deform.dtype)
    with torch.no_grad():
        return deform(x).double().numpy().squeeze()


class DeformedField(nn.Module):
    """Garment evaluated at x + offset(x); sampled over its box dilated by the offset bound."""

    def __init__(self, cloth, deform: DeformationField):
        super().__init__()
        self.cloth = cloth
        self.deform = deform
        self.aabb = cloth.aabb.dilated(deform.max_offset)
        dt = getattr(cloth, "dtype", torch.float32)
        self.register_buffer("box_min", torch.tensor(self.aabb.min, dtype=dt), persistent=False)
        self.register_buffer("box_max", torch.tensor(self.aabb.max, dtype=dt), persistent=False)

    @property
    def dtype(self):
        return getattr(self.cloth, "dtype", torch.float32)

    def forward(self, x):
        x = x.to(self.dtype)
        sigma = x.new_zeros(x.shape[0])
        color = x.new_zeros(x.shape[0], 3)
        idx = torch.nonzero(torch.all((x >= self.box_min) & (x <= self.box_max), -1), as_tuple=True)[0]
        if idx.numel():
            xi = x[idx]
            moved = xi + self.deform(xi).to(self.dtype)
            s, c = self.cloth(moved)
            sigma = sigma.index_put((idx,), s)
            color = color.index_put((idx,), c)
        return sigma, color


class ScaledField(nn.Module):
    """Uniformly resized garment: evaluates the original at x / scale about ``center``."""

    def __init__(self, cloth, scale: float, center=(0.0, 0.0, 0.0)):
        super().__init__()
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.cloth = cloth
        self.scale = float(scale)
        self.center = tuple(float(c) for c in center)
        lo = [c + (m - c) * scale for m, c in zip(cloth.aabb.min, self.center)]
        hi = [c + (m - c) * scale for m, c in zip(cloth.aabb.max, self.center)]
        self.aabb = AABB(tuple(lo), tuple(hi))

    @property
    def dtype(self):
        return getattr(self.cloth, "dtype", torch.float32)

    def forward(self, x):
        c = x.new_tensor(self.center)
        return self.cloth(c + (x - c) / self.scale)


def train_transfer(cloth, new_stack: Sequence, prompts: tuple[str, str],
                   providers: tuple[GuidanceProvider, GuidanceProvider], config: TrainConfig,
                   scene: SceneConfig, deform: DeformationField | None = None,
                   progress: Callable | None = None):
    """Fit a deformation of the frozen ``cloth`` onto ``new_stack`` (target body first).

    Runs ``config.transfer_iterations`` steps of the dual cloth loss with
    only the deformation weights trainable. Returns (deform, history).
    """
    if deform is None:
        deform = DeformationField(max_offset=config.deform_max_offset, seed=config.seed,
                                  dtype=getattr(cloth, "dtype", torch.float32))
    modules = [m for m in list(new_stack) + [cloth] if isinstance(m, nn.Module)]
    saved = [[q.requires_grad for q in m.parameters()] for m in modules]
    for m in modules:
        for q in m.parameters():
            q.requires_grad_(False)
    wrapped = DeformedField(cloth, deform)
    full = list(new_stack) + [wrapped]
    p = len(full) - 1
    params = dict(deform.named_parameters())
    run_config = config.with_iterations(config.transfer_iterations)
    rng = np.random.default_rng(run_config.seed)
    state = OptimizerState()
    history = []
    t0 = time.perf_counter()
    try:
        for it in range(1, run_config.iterations + 1):
            res = run_config.resolution_at(it)
            try:
                camera = sample_camera(scene.camera_dist, res, rng)
                skeleton = project_skeleton(scene.joints, scene.bones, camera)
                grads, report = cloth_loss_step(full, p, camera, skeleton, prompts, providers,
                                                run_config, rng, params)
                adam_step(params, grads, state, run_config.lr, run_config.betas, run_config.eps,
                          run_config.grad_clip)
            except (LayerwiseError, ValueError) as exc:
                raise TrainingError(f"transfer failed: {exc}", iteration=it) from exc
            history.append(StepRecord(it, res, report))
            if progress is not None and (it % 10 == 0 or it == run_config.iterations):
                progress("transfer", it, report, time.perf_counter() - t0)
    finally:
        for m, flags in zip(modules, saved):
            for q, flag in zip(m.parameters(), flags):
                q.requires_grad_(flag)
    return deform, history


def density_mass(field, region: Callable[[torch.Tensor], torch.Tensor], resolution: int = 64,
                 box=(-1.0, 1.0)) -> float:
    """Integral of the field's density over voxel centers where ``region`` holds."""
    lo, hi = box
    step = (hi - lo) / resolution
    axis = lo + step * (torch.arange(resolution, dtype=torch.float64) + 0.5)
    total = 0.0
    with torch.no_grad():
        for x in axis:
            yy, zz = torch.meshgrid(axis, axis, indexing="ij")
            pts = torch.stack([torch.full_like(yy, float(x)), yy, zz], -1).reshape(-1, 3)
            sel = region(pts)
            if bool(sel.any()):
                sigma, _ = field(pts[sel])
                total += float(sigma.double().sum())
    return total * step**3
