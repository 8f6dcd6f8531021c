"""Score-distillation guidance: noise schedule, residual providers, pixel gradients.

A provider returns the per-pixel residual eps_hat - eps for a rendered
image. The SDS gradient with respect to the image is w(t) times that
residual; it is chained through the renderer with the provider treated as
a constant (no differentiation through the denoiser).

Providers receive the clean image together with t and a noise seed and do
their own noising, so latent-space servers can noise in their own space.
"""

from __future__ import annotations

import abc
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ProviderError, ProviderTimeout, ServiceError

COSINE_OFFSET = 0.008
DEFAULT_T_RANGE = (0.02, 0.98)
ENV_ENDPOINT = "TELA_GUIDANCE_URL"


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving cosine schedule with weighting w(t) = 1 - alpha_bar(t)."""

    offset: float = COSINE_OFFSET

    def _f(self, t):
        return np.cos((np.asarray(t, dtype=np.float64) + self.offset) / (1.0 + self.offset) * np.pi / 2) ** 2

    def alpha_bar(self, t):
        return self._f(t) / self._f(0.0)

    def weight(self, t):
        return 1.0 - self.alpha_bar(t)


DEFAULT_SCHEDULE = NoiseSchedule()


def _check_t(t):
    if not 0.0 < t < 1.0:
        raise ValueError(f"timestep must lie in (0, 1), got {t}")


def noise_image(u, t: float, seed: int, schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    """Forward-noise a [0, 1] image: u_t = sqrt(a) (2u - 1) + sqrt(1 - a) eps."""
    _check_t(t)
    u = np.asarray(u, dtype=np.float64)
    eps = np.random.default_rng(seed).standard_normal(u.shape)
    a = float(schedule.alpha_bar(t))
    return math.sqrt(a) * (2.0 * u - 1.0) + math.sqrt(1.0 - a) * eps, eps


def sample_timestep(rng: np.random.Generator, t_min: float = DEFAULT_T_RANGE[0],
                    t_max: float = DEFAULT_T_RANGE[1]) -> float:
    if not 0.0 < t_min <= t_max < 1.0:
        raise ValueError(f"bad timestep range ({t_min}, {t_max})")
    if t_min == t_max:
        return float(t_min)
    return float(rng.uniform(t_min, t_max))


@dataclass(frozen=True)
class ViewInfo:
    """Per-call rendering context; real diffusion providers ignore it."""

    camera: object
    background: object
    window: tuple[int, int, int, int] | None = None


class GuidanceProvider(abc.ABC):
    @abc.abstractmethod
    def residual(self, image, prompt: str, t: float, skeleton=None, seed: int = 0,
                 view: ViewInfo | None = None) -> np.ndarray:
        """Residual eps_hat - eps with the shape of ``image`` (H, W, 3)."""


def _validated(res, shape):
    res = np.asarray(res, dtype=np.float64)
    if res.shape != tuple(shape):
        raise ProtocolError(f"residual shape {res.shape} does not match image {tuple(shape)}")
    if not np.all(np.isfinite(res)):
        raise ProtocolError("residual contains non-finite values")
    return res


class SyntheticProvider(GuidanceProvider):
    """Photometric stand-in for a diffusion model: residual = image - reference.

    ``reference`` is either a fixed (H, W, 3) image or a callable taking a
    :class:`ViewInfo` and returning the reference for that view. SDS with
    this provider is w(t) times the gradient of 1/2 ||u - reference||^2.
    """

    def __init__(self, reference):
        self._reference = reference

    def reference_for(self, view: ViewInfo | None, shape) -> np.ndarray:
        if callable(self._reference):
            if view is None:
                raise ProviderError("view-dependent synthetic provider needs view info")
            ref = self._reference(view)
        else:
            ref = self._reference
            if view is not None and view.window is not None:
                x0, y0, w, h = view.window
                ref = np.asarray(getattr(ref, "color", ref))[y0:y0 + h, x0:x0 + w]
        ref = getattr(ref, "color", ref)
        if hasattr(ref, "detach"):
            ref = ref.detach().double().numpy()
        ref = np.asarray(ref, dtype=np.float64)
        if ref.shape != tuple(shape):
            raise ProviderError(f"reference shape {ref.shape} does not match image {tuple(shape)}")
        return ref

    def residual(self, image, prompt, t, skeleton=None, seed=0, view=None):
        image = np.asarray(image, dtype=np.float64)
        return image - self.reference_for(view, image.shape)


def make_synthetic_provider(reference) -> SyntheticProvider:
    if hasattr(reference, "color"):
        reference = reference.color.detach().double().numpy()
    return SyntheticProvider(reference)


class RemoteProvider(GuidanceProvider):
    """HTTP client for a residual server.

    POST {endpoint}/v1/residual with JSON {width, height, image, prompt, t,
    seed[, skeleton][, params]}; the reply carries {"residual": [...]} as
    h*w*3 row-major floats.
    """

    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 2,
                 params: dict | None = None, transport=None):
        import httpx

        if not endpoint.startswith(("http://", "https://")):
            raise ValueError(f"endpoint must be an http(s) URL, got {endpoint!r}")
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.params = params
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def close(self):
        self._client.close()

    def payload(self, image, prompt, t, skeleton=None, seed=0) -> dict:
        image = np.asarray(image, dtype=np.float64)
        h, w, _ = image.shape
        body = {
            "width": int(w),
            "height": int(h),
            "image": image.reshape(-1).tolist(),
            "prompt": prompt,
            "t": float(t),
            "seed": int(seed) % 2**64,
        }
        if skeleton is not None:
            pix = np.asarray(getattr(skeleton, "pixels", skeleton), dtype=np.float64)
            if pix.shape != image.shape:
                raise ValueError("skeleton image must match the rendered image shape")
            body["skeleton"] = pix.reshape(-1).tolist()
        if self.params is not None:
            body["params"] = self.params
        return body

    def residual(self, image, prompt, t, skeleton=None, seed=0, view=None):
        import httpx

        image = np.asarray(image, dtype=np.float64)
        body = self.payload(image, prompt, t, skeleton, seed)
        url = f"{self.endpoint}/v1/residual"
        last = None
        for _ in range(self.retries + 1):
            try:
                response = self._client.post(url, json=body)
                break
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = exc
        else:
            raise ProviderTimeout(f"no answer from {url} after {self.retries + 1} attempt(s): {last}")
        if not 200 <= response.status_code < 300:
            raise ServiceError(f"{url} returned HTTP {response.status_code}: {response.text[:200]}",
                               status=response.status_code)
        try:
            data = response.json()
        except (json.JSONDecodeError, ValueError) as exc:
            raise ProtocolError(f"response is not JSON: {response.text[:200]!r}") from exc
        if not isinstance(data, dict) or not isinstance(data.get("residual"), list):
            raise ProtocolError(f"response lacks a 'residual' array: {response.text[:200]!r}")
        flat = data["residual"]
        if len(flat) != image.size:
            raise ProtocolError(f"residual has {len(flat)} values, expected {image.size}")
        try:
            arr = np.asarray(flat, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"residual holds non-numeric entries: {str(flat)[:200]}") from exc
        return _validated(arr.reshape(image.shape), image.shape)


def make_remote_provider(endpoint: str | None = None, timeout: float = 60.0, retries: int = 2,
                         params: dict | None = None) -> RemoteProvider:
    endpoint = endpoint or os.environ.get(ENV_ENDPOINT)
    if not endpoint:
        raise ValueError(f"no endpoint given and {ENV_ENDPOINT} is unset")
    return RemoteProvider(endpoint, timeout, retries, params)


def sds_pixel_grad(provider: GuidanceProvider, u, prompt: str, t: float, skeleton=None,
                   seed: int = 0, schedule: NoiseSchedule = DEFAULT_SCHEDULE,
                   view: ViewInfo | None = None) -> np.ndarray:
    """w(t) * residual: the SDS gradient with respect to the image pixels."""
    _check_t(t)
    u = np.asarray(u, dtype=np.float64)
    res = _validated(provider.residual(u, prompt, t, skeleton=skeleton, seed=seed, view=view), u.shape)
    return float(schedule.weight(t)) * res
