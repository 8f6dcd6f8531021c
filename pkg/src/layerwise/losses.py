"""Mask regularization and the per-step body and dual cloth objectives.

Every loss here is expressed through its gradient with respect to the
rendered pixels (color and mask); those pixel gradients are pulled back to
the parameters with a single vector-Jacobian product through the renderer.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .config import RegWeights, TrainConfig
from .guidance import DEFAULT_SCHEDULE, GuidanceProvider, NoiseSchedule, ViewInfo, sample_timestep, sds_pixel_grad
from .render import render_image, render_pair
from .scene import Camera

__all__ = ["RegWeights", "LossReport", "reg_loss", "body_loss_step", "cloth_loss_step"]

ENTROPY_CLAMP = 1e-5
MASK_RANGE_SLACK = 1e-6


@dataclass
class LossReport:
    sds_composed: float | None = None
    sds_cloth_only: float | None = None
    reg_composed: float | None = None
    reg_cloth_only: float | None = None
    total: float = 0.0
    resolution: int | None = None
    t: float | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def reg_loss(mask, weights: RegWeights = RegWeights()):
    """lambda1 * BE(M) + lambda2 * |M|_1 with both terms averaged over pixels.

    Returns (value, gradient w.r.t. every mask pixel). The entropy uses m
    clamped to [1e-5, 1 - 1e-5]; at clamped pixels the gradient is taken
    at the clamp boundary, so it stays bounded for saturated masks.
    """
    m = torch.as_tensor(mask).detach()
    if not m.is_floating_point():
        m = m.double()
    if bool((m < -MASK_RANGE_SLACK).any()) or bool((m > 1 + MASK_RANGE_SLACK).any()):
        raise ValueError("mask values must lie in [0, 1]")
    m = m.clamp(0.0, 1.0)
    n = m.numel()
    mc = m.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    entropy = -(mc * torch.log(mc) + (1.0 - mc) * torch.log1p(-mc)).mean()
    l1 = m.mean()
    value = weights.lambda1 * entropy + weights.lambda2 * l1
    grad = (weights.lambda1 * (torch.log1p(-mc) - torch.log(mc)) + weights.lambda2) / n
    return float(value), grad


def _sds_value(pixel_grad, residual_weight):
    # 1/2 w mean(res^2): the photometric loss a synthetic provider implies
    if residual_weight <= 0:
        return 0.0
    return float(0.5 * np.mean(pixel_grad**2) / residual_weight)


def _backprop(params: Mapping[str, torch.Tensor], pairs):
    """Vector-Jacobian product of (output, pixel-gradient) pairs onto ``params``."""
    names = list(params)
    tensors = [params[n] for n in names]
    outs, grads = [], []
    for out, g in pairs:
        if out.requires_grad:
            outs.append(out)
            grads.append(torch.as_tensor(g, dtype=out.dtype))
    zeros = {n: torch.zeros_like(p) for n, p in zip(names, tensors)}
    if not outs or not tensors:
        return zeros
    result = torch.autograd.grad(outs, tensors, grads, allow_unused=True)
    return {n: (g if g is not None else zeros[n]) for n, g in zip(names, result)}


def _window(config: TrainConfig, res: int, rng):
    if config.patch is None or config.patch >= res:
        return None
    x0, y0 = rng.integers(0, res - config.patch + 1, size=2)
    return int(x0), int(y0), config.patch, config.patch


def _crop(img, window):
    if img is None:
        return None
    pix = getattr(img, "pixels", img)
    if window is None:
        return pix
    x0, y0, w, h = window
    return pix[y0:y0 + h, x0:x0 + w]


def body_loss_step(body, camera: Camera, skeleton_img, prompt: str, provider: GuidanceProvider,
                   config: TrainConfig, rng: np.random.Generator,
                   params: Mapping[str, torch.Tensor] | None = None,
                   schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    """Gradients of skeleton-conditioned SDS plus mask regularization for the body."""
    if params is None:
        params = dict(body.named_parameters())
    background = float(rng.uniform())
    window = _window(config, camera.height, rng)
    img = render_image([body], camera, "composed", th=config.th, background=background,
                       n_samples=config.n_samples, jitter=config.jitter, rng=rng, window=window)
    t = sample_timestep(rng, *config.t_range)
    seed = int(rng.integers(2**63))
    view = ViewInfo(camera, background, window)
    u = img.color.detach().double().numpy()
    g_color = sds_pixel_grad(provider, u, prompt, t, _crop(skeleton_img, window), seed, schedule, view)
    reg_value, g_mask = reg_loss(img.mask, config.reg)
    grads = _backprop(params, [(img.color, g_color), (img.mask, g_mask)])
    w = float(schedule.weight(t))
    sds_value = _sds_value(g_color, w)
    report = LossReport(sds_composed=sds_value, reg_composed=reg_value,
                        total=sds_value + reg_value, resolution=camera.height, t=t)
    return grads, report


def cloth_loss_step(stack: Sequence, p: int, camera: Camera, skeleton_img,
                    prompts: tuple[str, str], providers: tuple[GuidanceProvider, GuidanceProvider],
                    config: TrainConfig, rng: np.random.Generator,
                    params: Mapping[str, torch.Tensor] | None = None,
                    schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    """Dual-loss gradients for garment layer ``p`` with layers 0..p-1 held fixed.

    The composed image (layers 0..p) gets skeleton-conditioned SDS and mask
    regularization; the cloth-only image of ``p`` gets plain SDS and mask
    regularization. Both share one camera, background and sample set.
    Gradients are returned for ``params`` only (default: layer p's).
    """
    if p < 1:
        raise ValueError("cloth_loss_step needs a garment layer (p >= 1)")
    if params is None:
        params = dict(stack[p].named_parameters())
    prompt_composed, prompt_cloth = prompts
    provider_composed, provider_cloth = providers
    terms = config.terms

    background = float(rng.uniform())
    window = _window(config, camera.height, rng)
    composed, cloth = render_pair(list(stack)[: p + 1], p, camera, th=config.th,
                                  background=background, n_samples=config.n_samples,
                                  jitter=config.jitter, rng=rng, window=window)
    view = ViewInfo(camera, background, window)
    t_c = sample_timestep(rng, *config.t_range)
    seed_c = int(rng.integers(2**63))
    t_p = sample_timestep(rng, *config.t_range)
    seed_p = int(rng.integers(2**63))

    pairs = []
    report = LossReport(resolution=camera.height, t=t_c)
    total = 0.0
    if terms.sds_composed:
        g = sds_pixel_grad(provider_composed, composed.color.detach().double().numpy(), prompt_composed,
                           t_c, _crop(skeleton_img, window), seed_c, schedule, view)
        report.sds_composed = _sds_value(g, float(schedule.weight(t_c)))
        total += terms.sds_composed * report.sds_composed
        pairs.append((composed.color, terms.sds_composed * g))
    if terms.reg_composed:
        value, g = reg_loss(composed.mask, config.reg)
        report.reg_composed = value
        total += terms.reg_composed * value
        pairs.append((composed.mask, terms.reg_composed * g))
    if terms.sds_cloth:
        g = sds_pixel_grad(provider_cloth, cloth.color.detach().double().numpy(), prompt_cloth,
                           t_p, None, seed_p, schedule, ViewInfo(camera, background, window))
        report.sds_cloth_only = _sds_value(g, float(schedule.weight(t_p)))
        total += terms.sds_cloth * report.sds_cloth_only
        pairs.append((cloth.color, terms.sds_cloth * g))
    if terms.reg_cloth:
        value, g = reg_loss(cloth.mask, config.reg)
        report.reg_cloth_only = value
        total += terms.reg_cloth * value
        pairs.append((cloth.mask, terms.reg_cloth * g))
    report.total = total
    return _backprop(params, pairs), report
