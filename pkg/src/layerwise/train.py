"""Progressive optimization: body stage, then garment stages with inner layers frozen."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .config import RegWeights, TrainConfig
from .errors import LayerwiseError, TrainingError
from .field import GridSpec, MlpSpec, RadianceField, init_field
from .guidance import DEFAULT_SCHEDULE, GuidanceProvider, SyntheticProvider, sds_pixel_grad
from .losses import LossReport, body_loss_step, cloth_loss_step, reg_loss
from .render import render_image
from .scene import AABB, SceneConfig, derive_prompts, orbit_camera, project_skeleton, sample_camera


# --------------------------------------------------------------------------
# Adam

@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
              state: OptimizerState, lr: float = 1e-2, betas=(0.9, 0.99), eps: float = 1e-15,
              clip: float | None = 1.0) -> OptimizerState:
    """Bias-corrected Adam update, in place on ``params``, after global-norm clipping."""
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name!r}")
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape "
                             f"{tuple(p.shape)} for {name!r}")
        if not bool(torch.isfinite(g).all()):
            raise ValueError(f"non-finite gradient in parameter block {name!r}")
    scale = 1.0
    if clip is not None:
        norm = float(torch.sqrt(sum((grads[n].double() ** 2).sum() for n in params))) if params else 0.0
        if norm > clip:
            scale = clip / norm
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name] * scale if scale != 1.0 else grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    return state


# --------------------------------------------------------------------------
# Stages

def parameter_hash(module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class StepRecord:
    iteration: int
    resolution: int
    losses: LossReport


def _frozen(module):
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def _run(config: TrainConfig, scene: SceneConfig, step_fn, params, progress, label):
    rng = np.random.default_rng(config.seed)
    state = OptimizerState()
    history = []
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        res = config.resolution_at(it)
        try:
            camera = sample_camera(scene.camera_dist, res, rng)
            skeleton = project_skeleton(scene.joints, scene.bones, camera)
            grads, report = step_fn(camera, skeleton, rng)
            adam_step(params, grads, state, config.lr, config.betas, config.eps, config.grad_clip)
        except (LayerwiseError, ValueError) as exc:
            raise TrainingError(f"{label} stage failed: {exc}", iteration=it) from exc
        history.append(StepRecord(it, res, report))
        if progress is not None and (it % 10 == 0 or it == config.iterations):
            progress(label, it, report, time.perf_counter() - t0)
    return history


def train_body(scene: SceneConfig, config: TrainConfig, provider: GuidanceProvider,
               field: RadianceField | None = None, progress: Callable | None = None):
    """Optimize the body layer; returns (field, per-step history)."""
    if field is None:
        field = init_field(config.grid, config.mlp, scene.body.aabb, seed=config.seed)
    prompt = derive_prompts(scene.base_prompt, scene.layers).body
    params = dict(field.named_parameters())

    def step(camera, skeleton, rng):
        return body_loss_step(field, camera, skeleton, prompt, provider, config, rng, params)

    history = _run(config, scene, step, params, progress, "body")
    return field, history


def train_cloth(scene: SceneConfig, stack: Sequence, p_name: str, config: TrainConfig,
                providers: tuple[GuidanceProvider, GuidanceProvider],
                field: RadianceField | None = None, progress: Callable | None = None):
    """Optimize garment ``p_name`` on top of the frozen ``stack`` (body first).

    Only the new layer's parameters and optimizer state evolve; every layer
    in ``stack`` has gradients disabled for the duration.
    """
    spec = scene.layer(p_name)
    if spec.is_body:
        raise ValueError("the body layer is trained with train_body")
    if field is None:
        field = init_field(config.grid, config.mlp, spec.aabb,
                           seed=config.seed + scene.layer_index(p_name))
    prompts = derive_prompts(scene.base_prompt, scene.layers)
    pair = (prompts.composed[p_name], prompts.cloth_only[p_name])
    inner = list(stack)
    restore = [[q.requires_grad for q in m.parameters()] for m in inner if hasattr(m, "parameters")]
    for m in inner:
        if hasattr(m, "parameters"):
            _frozen(m)
    full = inner + [field]
    p = len(inner)
    params = dict(field.named_parameters())

    def step(camera, skeleton, rng):
        return cloth_loss_step(full, p, camera, skeleton, pair, providers, config, rng, params)

    try:
        history = _run(config, scene, step, params, progress, p_name)
    finally:
        flags = iter(restore)
        for m in inner:
            if hasattr(m, "parameters"):
                for q, flag in zip(m.parameters(), next(flags)):
                    q.requires_grad_(flag)
    return field, history


# --------------------------------------------------------------------------
# Gradient checking

class NonDeterministicClosureError(LayerwiseError, RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_parameter: str
    n_checked: int
    tolerance: float
    errors: list[tuple[str, float, float, float]]  # (name, analytic, numeric, rel)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(loss_closure: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               sample_fraction: float = 0.01, h: float = 1e-4, min_samples: int = 0,
               seed: int = 0, tolerance: float = 1e-3, floor: float = 1e-7) -> GradCheckReport:
    """Compare autograd against central differences on a random parameter subset.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Half of the
    probes are drawn from entries with a nonzero analytic gradient (when
    there are any) so sparse parameter blocks such as hash tables are
    exercised where they matter.
    """
    names = list(params)
    with torch.no_grad():
        base = float(loss_closure())
        if float(loss_closure()) != base:
            raise NonDeterministicClosureError("loss closure returned different values for identical parameters")
    loss = loss_closure()
    analytic = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    analytic = [torch.zeros_like(params[n]) if g is None else g.detach() for n, g in zip(names, analytic)]

    sizes = [params[n].numel() for n in names]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])
    n_probe = min(total, max(min_samples, int(np.ceil(sample_fraction * total))))
    flat_analytic = torch.cat([g.reshape(-1) for g in analytic]).double().numpy()
    rng = np.random.default_rng(seed)
    nonzero = np.flatnonzero(flat_analytic != 0)
    n_nz = min(len(nonzero), n_probe // 2)
    chosen = set(rng.choice(nonzero, n_nz, replace=False).tolist()) if n_nz else set()
    while len(chosen) < n_probe:
        chosen.update(rng.choice(total, n_probe - len(chosen), replace=False).tolist())
    chosen = sorted(chosen)[:n_probe] if len(chosen) > n_probe else sorted(chosen)

    errors = []
    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for flat_idx in chosen:
            block = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = flat_idx - int(offsets[block])
            p = params[names[block]].view(-1)
            orig = p[local].item()
            p[local] = orig + h
            up = float(loss_closure())
            p[local] = orig - h
            down = float(loss_closure())
            p[local] = orig
            numeric = (up - down) / (2 * h)
            a = float(flat_analytic[flat_idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            label = f"{names[block]}[{local}]"
            errors.append((label, a, numeric, rel))
            if rel >= worst:
                worst, worst_name = rel, label
    return GradCheckReport(worst, worst_name, len(chosen), tolerance, errors)


def gradcheck_closure(seed: int = 0, res: int = 4, n_samples: int = 8, grid=None, mlp=None,
                      weights: RegWeights = RegWeights(), t: float = 0.5):
    """Loss closure for checking the body objective's pixel-gradient pipeline.

    One float64 render (fixed camera, no jitter) against a fixed random
    synthetic reference. The returned scalar has the value of
    ``1/2 w(t) |u - ref|^2 + L_reg(mask)`` while its autograd gradient is
    the vector-Jacobian product of the pipeline's own pixel gradients
    (``sds_pixel_grad`` and ``reg_loss``), so ``grad_check`` compares those
    against finite differences of the true objective. Returns (closure, params).
    """
    grid = grid or GridSpec(levels=4, features=2, table_size=2**8, n_min=4, n_max=16)
    mlp = mlp or MlpSpec(hidden=(16, 16))
    f = init_field(grid, mlp, AABB((-0.6, -0.6, -0.6), (0.6, 0.6, 0.6)), seed=seed, dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # hash entries large enough to give the encoding real spatial structure
        f.grid.table.uniform_(-0.5, 0.5, generator=gen)
    camera = orbit_camera(25.0, 10.0, 1.6, (res, res), 50.0)
    reference = np.random.default_rng(seed).uniform(size=(res, res, 3))
    provider = SyntheticProvider(reference)
    w = float(DEFAULT_SCHEDULE.weight(t))
    ref_t = torch.as_tensor(reference)

    def closure():
        img = render_image([f], camera, "composed", background=0.5, n_samples=n_samples,
                           dtype=torch.float64)
        g_color = torch.as_tensor(sds_pixel_grad(provider, img.color.detach().numpy(), "", t))
        reg_value, g_mask = reg_loss(img.mask, weights)
        value = 0.5 * w * float(((img.color.detach() - ref_t) ** 2).sum()) + reg_value
        link = (img.color * g_color).sum() + (img.mask * g_mask).sum()
        return link - link.detach() + value

    return closure, dict(f.named_parameters())
