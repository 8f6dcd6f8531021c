"""Volume rendering of layer stacks with transparency-based stratified composition.

A stack is an ordered sequence of fields, body first, garments outward.
Along each ray the samples are split between layers by thresholding the
transmittance of the inner layers (computed from their pointwise maximum
density): samples the inner stack has not yet occluded belong to the outer
layer, the rest fall through to the inner layers. Every sample is owned by
exactly one layer and only that layer's density and color are rendered
there, which keeps an outer layer from showing through (or penetrating)
an inner one.

The assignment is a hard, per-step decision and is excluded from
differentiation. Accumulation weights use the transmittance of the
assigned per-point densities, so the composed image is an ordinary
single-field volume rendering integral over the assigned samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .scene import SCENE_BOX, Camera

EXP_FLOOR = -80.0
DEFAULT_TH = 0.5
MODES = ("composed", "cloth-only", "baseline-max")


@dataclass
class RaySamples:
    """Ordered samples along a batch of rays.

    Missed rays (``hit`` false) carry zero spacings and contribute nothing.
    """

    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3)
    depths: torch.Tensor  # (R, N)
    deltas: torch.Tensor  # (R, N)
    hit: torch.Tensor  # (R,)
    near: torch.Tensor  # (R,)
    far: torch.Tensor  # (R,)

    @property
    def n_rays(self) -> int:
        return self.depths.shape[0]

    @property
    def n_samples(self) -> int:
        return self.depths.shape[1]

    @property
    def empty(self) -> bool:
        return not bool(self.hit.any())

    def positions(self) -> torch.Tensor:
        return self.origins[:, None, :] + self.depths[..., None] * self.directions[:, None, :]

    def select(self, index) -> "RaySamples":
        return RaySamples(*(getattr(self, f)[index] for f in
                            ("origins", "directions", "depths", "deltas", "hit", "near", "far")))


def ray_box(origins, directions, lo=SCENE_BOX[0], hi=SCENE_BOX[1]):
    """Slab test against the axis-aligned cube [lo, hi]^3.

    Returns (near, far, hit) with near clamped at 0 for origins inside the box.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    t_lo = np.minimum(t1, t2)
    t_hi = np.maximum(t1, t2)
    parallel = d == 0
    inside_slab = (o >= lo) & (o <= hi)
    t_lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t_lo)
    t_hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t_hi)
    near = np.maximum(t_lo.max(-1), 0.0)
    far = t_hi.min(-1)
    hit = far > near + 1e-9
    return near, far, hit


def sample_rays(origins, directions, n_samples: int, jitter: bool = False,
                rng: np.random.Generator | None = None, dtype=torch.float32) -> RaySamples:
    """Uniform depths between the scene-box entry and exit of each ray.

    Depths sit at stratum midpoints, or at one uniform draw per stratum
    when ``jitter`` is set. The last spacing is the mean of the others.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    near, far, hit = ray_box(o, d)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 1.0)
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.uniform(size=(o.shape[0], n_samples))
    else:
        u = np.full((o.shape[0], n_samples), 0.5)
    depths = near[:, None] + (far - near)[:, None] * (np.arange(n_samples) + u) / n_samples
    gaps = np.diff(depths, axis=-1)
    deltas = np.concatenate([gaps, gaps.mean(-1, keepdims=True)], -1)
    deltas = np.where(hit[:, None], deltas, 0.0)
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return RaySamples(t(o), t(d), t(depths), t(deltas), torch.as_tensor(hit), t(near), t(far))


def sample_ray(camera: Camera, pixel, n_samples: int, jitter: bool = False,
               rng=None, dtype=torch.float32) -> RaySamples:
    """Samples along the ray through the center of pixel (column, row)."""
    col, row = pixel
    if not (0 <= col < camera.width and 0 <= row < camera.height):
        raise ValueError(f"pixel {pixel} outside a {camera.width}x{camera.height} image")
    o, d = camera.pixel_rays(window=(col, row, 1, 1))
    return sample_rays(o, d, n_samples, jitter, rng, dtype)


# --------------------------------------------------------------------------
# Per-ray quantities

def transmittance(sigmas: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """T_i = exp(-sum_{j<i} sigma_j delta_j) along the last axis; T_1 = 1."""
    sigmas = torch.as_tensor(sigmas)
    deltas = torch.as_tensor(deltas, dtype=sigmas.dtype)
    if sigmas.shape != deltas.shape:
        raise ValueError("sigmas and deltas must have the same shape")
    if bool((sigmas < 0).any()):
        raise ValueError("densities must be non-negative")
    tau = sigmas * deltas
    zero = torch.zeros_like(tau[..., :1])
    acc = torch.cat([zero, torch.cumsum(tau, -1)[..., :-1]], -1)
    return torch.exp(torch.clamp(-acc, min=EXP_FLOOR))


def accumulate(sigmas: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor):
    """Volume-rendering sum: returns (color (R, 3), alpha (R,))."""
    trans = transmittance(sigmas, deltas)
    opacity = 1.0 - torch.exp(torch.clamp(-sigmas * deltas, min=EXP_FLOOR))
    weights = trans * opacity
    return (weights[..., None] * colors).sum(-2), weights.sum(-1)


def _evaluate(field, samples: RaySamples):
    pts = samples.positions().reshape(-1, 3)
    sigma, color = field(pts)
    shape = samples.depths.shape
    return sigma.reshape(shape).to(samples.depths.dtype), color.reshape(shape + (3,)).to(samples.depths.dtype)


def _check_th(th):
    if not 0.0 < th < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {th}")


def volume_render(field, samples: RaySamples):
    sigma, color = _evaluate(field, samples)
    return accumulate(sigma, color, samples.deltas)


def max_density_profile(inner_fields: Sequence, samples: RaySamples) -> torch.Tensor:
    if not inner_fields:
        raise ValueError("need at least one inner field")
    sigmas = [_evaluate(f, samples)[0] for f in inner_fields]
    return torch.stack(sigmas).amax(0)


def partition(profile: torch.Tensor, th: float) -> torch.Tensor:
    """Split index k: the number of leading samples with transparency above ``th``.

    Profiles are non-increasing, so these samples form a prefix (1-based,
    k >= 1 because T_1 = 1).
    """
    _check_th(th)
    return (torch.as_tensor(profile) > th).sum(-1)


def _chain_owner(sigmas: Sequence[torch.Tensor], deltas: torch.Tensor, th: float) -> torch.Tensor:
    """Owner positions (into ``sigmas``) for every sample.

    Sample i belongs to the outermost layer l whose inner stack 0..l-1
    still has transparency above ``th`` at i.
    """
    owner = torch.zeros(deltas.shape, dtype=torch.int64)
    running = None
    for l in range(1, len(sigmas)):
        s = sigmas[l - 1].detach()
        running = s if running is None else torch.maximum(running, s)
        owner = torch.where(transmittance(running, deltas) > th, l, owner)
    return owner


def assign_layers(stack: Sequence, samples: RaySamples, th: float = DEFAULT_TH,
                  active: Sequence[int] | None = None) -> torch.Tensor:
    """Owning layer index (into ``stack``) for each sample, shape (R, N)."""
    _check_th(th)
    if not len(stack):
        raise ValueError("empty layer stack")
    active = sorted(active) if active is not None else list(range(len(stack)))
    with torch.no_grad():
        sigmas = [_evaluate(stack[i], samples)[0] for i in active[:-1]]
    sigmas.append(None)
    owner = _chain_owner(sigmas, samples.deltas, th)
    return torch.as_tensor(active)[owner]


def _compose_from(sigmas, colors, owner, deltas):
    sig = torch.stack(sigmas)
    col = torch.stack(colors)
    sigma = sig.gather(0, owner[None])[0]
    color = col.gather(0, owner[None, ..., None].expand(1, *owner.shape, 3))[0]
    return accumulate(sigma, color, deltas)


def compose_render(stack: Sequence, active: Sequence[int], samples: RaySamples,
                   th: float = DEFAULT_TH, owner: torch.Tensor | None = None):
    """Stratified composition of the active layers (the body must be active).

    ``owner`` optionally fixes the per-sample assignment (stack indices),
    e.g. to hold it constant across finite-difference probes.
    """
    _check_th(th)
    active = sorted(set(active))
    if 0 not in active:
        raise ValueError("compose_render needs the body (layer 0); use cloth_only_render")
    evals = [_evaluate(stack[i], samples) for i in active]
    sigmas = [e[0] for e in evals]
    colors = [e[1] for e in evals]
    if owner is None:
        local = _chain_owner(sigmas, samples.deltas, th)
    else:
        lookup = torch.full((len(stack),), -1, dtype=torch.int64)
        lookup[torch.as_tensor(active)] = torch.arange(len(active))
        local = lookup[owner]
        if bool((local < 0).any()):
            raise ValueError("owner references an inactive layer")
    return _compose_from(sigmas, colors, local, samples.deltas)


def _inner_keep(inner_sigmas, deltas, th):
    running = torch.stack([s.detach() for s in inner_sigmas]).amax(0)
    return transmittance(running, deltas) > th


def cloth_only_render(stack: Sequence, p: int, samples: RaySamples, th: float = DEFAULT_TH,
                      keep: torch.Tensor | None = None):
    """Render layer ``p`` alone on the samples its inner stack 0..p-1 leaves transparent."""
    _check_th(th)
    if p < 1:
        raise ValueError("cloth_only_render needs a garment layer (p >= 1)")
    sig_p, col_p = _evaluate(stack[p], samples)
    if keep is None:
        with torch.no_grad():
            inner = [_evaluate(stack[i], samples)[0] for i in range(p)]
        keep = _inner_keep(inner, samples.deltas, th)
    return accumulate(torch.where(keep, sig_p, torch.zeros_like(sig_p)), col_p, samples.deltas)


def compose_and_cloth_only(stack: Sequence, p: int, samples: RaySamples, th: float = DEFAULT_TH):
    """Composed render of layers 0..p and cloth-only render of p from one evaluation pass."""
    _check_th(th)
    if p < 1:
        raise ValueError("needs a garment layer (p >= 1)")
    evals = [_evaluate(stack[i], samples) for i in range(p + 1)]
    sigmas = [e[0] for e in evals]
    colors = [e[1] for e in evals]
    owner = _chain_owner(sigmas, samples.deltas, th)
    composed = _compose_from(sigmas, colors, owner, samples.deltas)
    keep = _inner_keep(sigmas[:p], samples.deltas, th)
    cloth = accumulate(torch.where(keep, sigmas[p], torch.zeros_like(sigmas[p])), colors[p],
                       samples.deltas)
    return composed, cloth


def compose_render_max_baseline(stack: Sequence, active: Sequence[int], samples: RaySamples):
    """Ablation baseline: max density across layers, color of the densest (ties go inward)."""
    active = sorted(set(active))
    if not active:
        raise ValueError("need at least one active layer")
    evals = [_evaluate(stack[i], samples) for i in active]
    sig = torch.stack([e[0] for e in evals])
    col = torch.stack([e[1] for e in evals])
    # argmax returns the first maximal index, i.e. the innermost layer on ties
    arg = sig.detach().argmax(0)
    sigma = sig.gather(0, arg[None])[0]
    color = col.gather(0, arg[None, ..., None].expand(1, *arg.shape, 3))[0]
    return accumulate(sigma, color, samples.deltas)


# --------------------------------------------------------------------------
# Images

@dataclass
class RenderedImage:
    color: torch.Tensor  # (H, W, 3), background composited
    mask: torch.Tensor  # (H, W), accumulated alpha

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.color.detach().double().numpy(), self.mask.detach().double().numpy()


class LayerStack(Sequence):
    """Named, ordered layers; index 0 is the body."""

    def __init__(self, names: Sequence[str] = (), fields: Sequence = ()):
        if len(names) != len(fields):
            raise ValueError("names and fields differ in length")
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names")
        self.names = list(names)
        self.fields = list(fields)

    def __getitem__(self, i):
        return self.fields[i]

    def __len__(self):
        return len(self.fields)

    def index(self, name: str) -> int:  # type: ignore[override]
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no layer named {name!r}; have {self.names}") from None

    def with_layer(self, name: str, field) -> "LayerStack":
        return LayerStack(self.names + [name], self.fields + [field])

    def subset(self, names: Sequence[str]) -> "LayerStack":
        return LayerStack(list(names), [self.fields[self.index(n)] for n in names])


def _stack_dtype(stack):
    for f in stack:
        dt = getattr(f, "dtype", None)
        if isinstance(dt, torch.dtype):
            return dt
    return torch.float32


def _background(background, h, w, dtype):
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=dtype)
    if bg.ndim == 0:
        return bg.expand(h, w, 3)
    if bg.ndim == 1:
        return bg.expand(h, w, 3)
    if bg.shape != (h, w, 3):
        raise ValueError(f"background must be scalar, RGB or ({h}, {w}, 3)")
    return bg


def _trace(camera, window, n_samples, jitter, rng, dtype, renderers: Callable, chunk_rays):
    """Shared ray setup; ``renderers`` maps RaySamples to a list of (color, alpha)."""
    x0, y0, w, h = window if window is not None else (0, 0, camera.width, camera.height)
    o, d = camera.pixel_rays((x0, y0, w, h))
    samples = sample_rays(o, d, n_samples, jitter, rng, dtype)
    hit_idx = torch.nonzero(samples.hit, as_tuple=True)[0]
    n_rays = o.shape[0]
    parts = None
    for start in range(0, hit_idx.numel(), chunk_rays):
        sub = samples.select(hit_idx[start:start + chunk_rays])
        outs = renderers(sub)
        if parts is None:
            parts = [([], []) for _ in outs]
        for acc, (c, a) in zip(parts, outs):
            acc[0].append(c)
            acc[1].append(a)
    return samples, hit_idx, n_rays, (h, w), parts


def _assemble(parts, hit_idx, n_rays, hw, dtype, background, n_outputs):
    h, w = hw
    bg = _background(background, h, w, dtype)
    images = []
    for k in range(n_outputs):
        color = torch.zeros(n_rays, 3, dtype=dtype)
        alpha = torch.zeros(n_rays, dtype=dtype)
        if parts is not None:
            color = color.index_put((hit_idx,), torch.cat(parts[k][0]))
            alpha = alpha.index_put((hit_idx,), torch.cat(parts[k][1]))
        color = color.reshape(h, w, 3)
        alpha = alpha.reshape(h, w)
        images.append(RenderedImage(color + (1.0 - alpha)[..., None] * bg, alpha))
    return images


def render_image(stack: Sequence, camera: Camera, mode: str = "composed",
                 active: Sequence[int] | None = None, layer: int | None = None,
                 th: float = DEFAULT_TH, background=0.0, n_samples: int = 64,
                 jitter: bool = False, rng=None, window=None, dtype=None,
                 chunk_rays: int = 8192) -> RenderedImage:
    """Render one view of the stack.

    ``mode`` is "composed" (stratified composition of ``active``),
    "cloth-only" (layer ``layer`` alone, truncated by its inner stack) or
    "baseline-max" (max-density fusion of ``active``). The returned color
    has the background composited as ``color + (1 - alpha) * background``;
    the mask is the alpha before compositing.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    dtype = dtype or _stack_dtype(stack)
    active = list(range(len(stack))) if active is None else list(active)
    if mode == "composed":
        fn = lambda s: [compose_render(stack, active, s, th)]
    elif mode == "cloth-only":
        if layer is None:
            raise ValueError("cloth-only mode needs a layer index")
        fn = lambda s: [cloth_only_render(stack, layer, s, th)]
    else:
        fn = lambda s: [compose_render_max_baseline(stack, active, s)]
    _, hit_idx, n_rays, hw, parts = _trace(camera, window, n_samples, jitter, rng, dtype, fn, chunk_rays)
    return _assemble(parts, hit_idx, n_rays, hw, dtype, background, 1)[0]


def render_pair(stack: Sequence, p: int, camera: Camera, th: float = DEFAULT_TH,
                background=0.0, n_samples: int = 64, jitter: bool = False, rng=None,
                window=None, dtype=None, chunk_rays: int = 8192):
    """Composed image of layers 0..p and cloth-only image of p on one shared sample set."""
    dtype = dtype or _stack_dtype(stack)
    fn = lambda s: list(compose_and_cloth_only(stack, p, s, th))
    _, hit_idx, n_rays, hw, parts = _trace(camera, window, n_samples, jitter, rng, dtype, fn, chunk_rays)
    composed, cloth = _assemble(parts, hit_idx, n_rays, hw, dtype, background, 2)
    return composed, cloth
