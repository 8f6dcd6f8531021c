"""Scene description: layers, prompts, cameras and skeleton conditioning images.

A scene is a JSON document listing the layers (body first, then garments
from the inside out), each with an axis-aligned box that bounds its
density, plus a canonical 3D skeleton used to produce per-view 2D skeleton
images for the conditioned guidance.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateViewError

SCENE_BOX = (-1.0, 1.0)

# One color per bone, cycled when a skeleton has more bones than entries.
BONE_PALETTE = np.array(
    [
        [255, 0, 0], [255, 85, 0], [255, 170, 0], [255, 255, 0],
        [170, 255, 0], [85, 255, 0], [0, 255, 0], [0, 255, 85],
        [0, 255, 170], [0, 255, 255], [0, 170, 255], [0, 85, 255],
        [0, 0, 255], [85, 0, 255], [170, 0, 255], [255, 0, 255],
        [255, 0, 170], [255, 0, 85],
    ],
    dtype=np.float64,
) / 255.0

# Line width in pixels at a 512-pixel-high image; scaled with the height.
BONE_WIDTH_AT_512 = 4.0
NEAR_PLANE = 1e-3

# Garments named by these nouns are plural ("a pair of jeans").
PAIRED_GARMENTS = frozenset(
    {
        "jeans", "pants", "trousers", "shorts", "leggings", "tights",
        "slacks", "joggers", "sweatpants", "chinos", "overalls", "socks",
        "shoes", "boots", "sneakers", "sandals", "gloves", "briefs",
    }
)


@dataclass(frozen=True)
class AABB:
    """Axis-aligned box; points on the boundary count as inside."""

    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= np.asarray(self.min)) & (p <= np.asarray(self.max)), axis=-1)

    def intersects(self, other: "AABB") -> bool:
        return all(
            a_lo <= b_hi and b_lo <= a_hi
            for a_lo, a_hi, b_lo, b_hi in zip(self.min, self.max, other.min, other.max)
        )

    def dilated(self, amount: float) -> "AABB":
        return AABB(
            tuple(v - amount for v in self.min), tuple(v + amount for v in self.max)
        )

    def to_dict(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    cloth_phrase: str
    aabb: AABB

    @property
    def is_body(self) -> bool:
        return self.cloth_phrase == ""


@dataclass(frozen=True)
class CameraDistribution:
    azimuth_range: tuple[float, float] = (0.0, 360.0)
    elevation_range: tuple[float, float] = (-10.0, 45.0)
    radius_range: tuple[float, float] = (2.2, 3.0)
    fov_y: float = 50.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PromptSet:
    body: str
    composed: dict[str, str] = field(default_factory=dict)
    cloth_only: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class SceneConfig:
    base_prompt: str
    layers: tuple[LayerSpec, ...]
    skeleton: tuple[tuple[str, tuple[float, float, float]], ...]
    bones: tuple[tuple[int, int], ...]
    camera_dist: CameraDistribution = CameraDistribution()
    seed: int = 0

    @property
    def body(self) -> LayerSpec:
        return self.layers[0]

    @property
    def joints(self) -> np.ndarray:
        return np.array([pos for _, pos in self.skeleton], dtype=np.float64)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise ConfigError(f"unknown layer {name!r}", key="layers")

    def layer_index(self, name: str) -> int:
        return self.layers.index(self.layer(name))

    def to_dict(self) -> dict:
        cam = self.camera_dist
        return {
            "base_prompt": self.base_prompt,
            "seed": self.seed,
            "layers": [
                {"name": l.name, "cloth_phrase": l.cloth_phrase, "aabb": l.aabb.to_dict()}
                for l in self.layers
            ],
            "skeleton": [{"name": n, "pos": list(p)} for n, p in self.skeleton],
            "bones": [list(b) for b in self.bones],
            "camera": {
                "azimuth_range": list(cam.azimuth_range),
                "elevation_range": list(cam.elevation_range),
                "radius_range": list(cam.radius_range),
                "fov_y": cam.fov_y,
                "look_at": list(cam.look_at),
            },
        }

    def hash(self) -> bytes:
        """SHA-256 over the canonical JSON form; identifies the scene in checkpoints."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


# --------------------------------------------------------------------------
# Loading and validation

_TOP_KEYS = {"base_prompt", "seed", "layers", "skeleton", "bones", "camera"}
_REQUIRED_KEYS = _TOP_KEYS - {"camera"}
_CAMERA_KEYS = {"azimuth_range", "elevation_range", "radius_range", "fov_y", "look_at"}


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, dict):
        raise ConfigError("expected an object", key=where)
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", key=where)
    for key in sorted(required):
        if key not in obj:
            raise ConfigError("missing required key", key=f"{where}.{key}" if where else key)


def _vec3(value, where):
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 3
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    ):
        raise ConfigError("expected [x, y, z]", key=where)
    out = tuple(float(v) for v in value)
    if not all(math.isfinite(v) for v in out):
        raise ConfigError("non-finite coordinate", key=where)
    return out


def _interval(value, where):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError("expected [lo, hi]", key=where)
    lo, hi = (float(v) for v in value)
    if not lo <= hi:
        raise ConfigError("empty interval", key=where)
    return lo, hi


def _parse_camera(obj) -> CameraDistribution:
    _check_keys(obj, _CAMERA_KEYS, set(), "camera")
    dist = CameraDistribution()
    updates = {}
    for key in ("azimuth_range", "elevation_range", "radius_range"):
        if key in obj:
            updates[key] = _interval(obj[key], f"camera.{key}")
    if "fov_y" in obj:
        updates["fov_y"] = float(obj["fov_y"])
    if "look_at" in obj:
        updates["look_at"] = _vec3(obj["look_at"], "camera.look_at")
    dist = replace(dist, **updates)
    if not 0.0 < dist.fov_y < 180.0:
        raise ConfigError("fov_y must lie in (0, 180)", key="camera.fov_y")
    el_lo, el_hi = dist.elevation_range
    if el_lo <= -90.0 or el_hi >= 90.0:
        raise ConfigError("elevation must lie in (-90, 90)", key="camera.elevation_range")
    if dist.radius_range[0] <= 0.0:
        raise ConfigError("radius must be positive", key="camera.radius_range")
    return dist


def parse_scene(doc: dict) -> SceneConfig:
    """Validate an already-decoded scene document."""
    _check_keys(doc, _TOP_KEYS, _REQUIRED_KEYS, "")
    base_prompt = doc["base_prompt"]
    if not isinstance(base_prompt, str) or not base_prompt.strip():
        raise ConfigError("must be a nonempty string", key="base_prompt")
    seed = doc["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("must be an unsigned integer", key="seed")

    raw_layers = doc["layers"]
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ConfigError("at least one layer is required", key="layers")
    layers = []
    for i, raw in enumerate(raw_layers):
        where = f"layers[{i}]"
        _check_keys(raw, {"name", "cloth_phrase", "aabb"}, {"name", "cloth_phrase", "aabb"}, where)
        name, phrase = raw["name"], raw["cloth_phrase"]
        if not isinstance(name, str) or not name:
            raise ConfigError("layer name must be a nonempty string", key=f"{where}.name")
        if not isinstance(phrase, str):
            raise ConfigError("must be a string", key=f"{where}.cloth_phrase")
        if i == 0 and phrase:
            raise ConfigError("the first layer is the body and takes no cloth phrase",
                              key=f"{where}.cloth_phrase")
        if i > 0 and not phrase.strip():
            raise ConfigError("garment layers need a cloth phrase", key=f"{where}.cloth_phrase")
        _check_keys(raw["aabb"], {"min", "max"}, {"min", "max"}, f"{where}.aabb")
        lo = _vec3(raw["aabb"]["min"], f"{where}.aabb.min")
        hi = _vec3(raw["aabb"]["max"], f"{where}.aabb.max")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ConfigError(f"layer {name!r}: aabb.min must be < aabb.max componentwise",
                              key=f"{where}.aabb")
        layers.append(LayerSpec(name, phrase.strip(), AABB(lo, hi)))
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        raise ConfigError("layer names must be unique", key="layers")
    for i, spec in enumerate(layers[1:], start=1):
        if not spec.aabb.intersects(layers[0].aabb):
            raise ConfigError(f"layer {spec.name!r} does not touch the body box",
                              key=f"layers[{i}].aabb")

    raw_skel = doc["skeleton"]
    if not isinstance(raw_skel, list) or not raw_skel:
        raise ConfigError("at least one joint is required", key="skeleton")
    skeleton = []
    lo_box, hi_box = SCENE_BOX
    for i, raw in enumerate(raw_skel):
        where = f"skeleton[{i}]"
        _check_keys(raw, {"name", "pos"}, {"name", "pos"}, where)
        pos = _vec3(raw["pos"], f"{where}.pos")
        if not all(lo_box <= v <= hi_box for v in pos):
            raise ConfigError("joint lies outside the scene box [-1, 1]^3", key=f"{where}.pos")
        skeleton.append((str(raw["name"]), pos))

    raw_bones = doc["bones"]
    if not isinstance(raw_bones, list):
        raise ConfigError("expected a list of [i, j] pairs", key="bones")
    bones = []
    for i, raw in enumerate(raw_bones):
        if (
            not isinstance(raw, (list, tuple))
            or len(raw) != 2
            or not all(isinstance(j, int) and not isinstance(j, bool) for j in raw)
        ):
            raise ConfigError("expected [i, j]", key=f"bones[{i}]")
        if not all(0 <= j < len(skeleton) for j in raw):
            raise ConfigError("unknown joint index", key=f"bones[{i}]")
        bones.append((raw[0], raw[1]))

    camera = _parse_camera(doc.get("camera", {}))
    return SceneConfig(base_prompt.strip(), tuple(layers), tuple(skeleton), tuple(bones),
                       camera, seed)


def load_scene(document: str | bytes) -> SceneConfig:
    """Parse and validate a scene given as JSON text.

    Raises ConfigError on malformed JSON, missing or unknown keys, and any
    violated invariant; the error's ``key`` names the offending entry.
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed scene document: {exc}") from exc
    return parse_scene(doc)


def load_scene_file(path) -> SceneConfig:
    return load_scene(Path(path).read_text(encoding="utf-8"))


def default_scene() -> SceneConfig:
    """Bundled A-pose skeleton with body, jeans and shirt layers."""
    text = resources.files("layerwise").joinpath("data/default_scene.json").read_text("utf-8")
    return load_scene(text)


# --------------------------------------------------------------------------
# Prompts

def _subject(base_prompt: str) -> str:
    text = base_prompt.strip()
    idx = text.find(" wearing ")
    return text[:idx].strip() if idx > 0 else text


def _strip_article(phrase: str) -> str:
    for article in ("a ", "an ", "the "):
        if phrase.lower().startswith(article):
            return phrase[len(article):]
    return phrase


def cloth_only_prompt(cloth_phrase: str) -> str:
    noun = _strip_article(cloth_phrase.strip())
    last = noun.split()[-1].lower() if noun.split() else ""
    quantifier = "a pair of" if last in PAIRED_GARMENTS else "a piece of"
    return f"{quantifier} {noun}"


def derive_prompts(base_prompt: str, layers: Sequence[LayerSpec]) -> PromptSet:
    """Fixed-template prompts for each training stage.

    The subject is the text of ``base_prompt`` before " wearing " (the whole
    prompt if absent). Templates:

    * body:          "{subject} only wearing underwear"
    * composed, p:   "{subject} only wearing {cloth_phrase}"
    * cloth-only, p: "a piece of {cloth}" or "a pair of {cloth}" for paired
      garments such as jeans, with any leading article dropped
    """
    subject = _subject(base_prompt)
    composed, cloth_only = {}, {}
    for spec in layers:
        if spec.is_body:
            continue
        composed[spec.name] = f"{subject} only wearing {spec.cloth_phrase}"
        cloth_only[spec.name] = cloth_only_prompt(spec.cloth_phrase)
    return PromptSet(f"{subject} only wearing underwear", composed, cloth_only)


# --------------------------------------------------------------------------
# Cameras

@dataclass(frozen=True)
class Camera:
    """Pinhole camera. ``rotation`` maps world to camera coordinates.

    Camera frame: +x right, +y down, +z forward (looking direction).
    """

    position: np.ndarray
    rotation: np.ndarray
    fov_y: float
    resolution: tuple[int, int]  # (width, height)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation must be orthonormal")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ValueError("camera resolution must be positive")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def focal(self) -> float:
        return 0.5 * self.height / math.tan(math.radians(self.fov_y) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.position) @ self.rotation.T

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and depth z for world points."""
        pc = self.to_camera(points)
        cx, cy = self.principal_point
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.focal * pc[..., 0] / z + cx, self.focal * pc[..., 1] / z + cy], -1)
        return uv, z

    def pixel_rays(self, window=None) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions through pixel centers, row-major.

        ``window`` = (x0, y0, w, h) restricts the rays to a sub-rectangle.
        """
        x0, y0, w, h = window if window is not None else (0, 0, self.width, self.height)
        cx, cy = self.principal_point
        jj, ii = np.meshgrid(np.arange(y0, y0 + h), np.arange(x0, x0 + w), indexing="ij")
        d_cam = np.stack(
            [(ii + 0.5 - cx) / self.focal, (jj + 0.5 - cy) / self.focal, np.ones(ii.shape)], -1
        ).reshape(-1, 3)
        d = d_cam @ self.rotation
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d

    def rolled(self, angle_deg: float) -> "Camera":
        """Camera rotated in-plane about its viewing axis."""
        a = math.radians(angle_deg)
        c, s = math.cos(a), math.sin(a)
        roll = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        return replace(self, rotation=roll @ self.rotation)


def look_at_rotation(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    forward = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise DegenerateViewError("viewing direction is parallel to the up vector")
    right /= norm
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def orbit_camera(azimuth, elevation, radius, resolution, fov_y=50.0, look_at=(0.0, 0.0, 0.0)):
    """Camera on a sphere around ``look_at``; azimuth 0 and elevation 0 sit on +z."""
    az, el = math.radians(azimuth), math.radians(elevation)
    offset = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    position = np.asarray(look_at, dtype=np.float64) + offset
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    return Camera(position, look_at_rotation(position, look_at), float(fov_y), tuple(resolution))


def sample_camera(dist: CameraDistribution, resolution, rng: np.random.Generator) -> Camera:
    """Draw a camera uniformly over the (azimuth, elevation, radius) box."""
    az = rng.uniform(*dist.azimuth_range) if dist.azimuth_range[0] < dist.azimuth_range[1] else dist.azimuth_range[0]
    el = rng.uniform(*dist.elevation_range) if dist.elevation_range[0] < dist.elevation_range[1] else dist.elevation_range[0]
    r = rng.uniform(*dist.radius_range) if dist.radius_range[0] < dist.radius_range[1] else dist.radius_range[0]
    return orbit_camera(az, el, r, resolution, dist.fov_y, dist.look_at)


# --------------------------------------------------------------------------
# Skeleton images

@dataclass(frozen=True)
class SkeletonImage:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]


def _clip_to_near(a, b):
    """Clip segment a-b (camera coordinates) to z >= NEAR_PLANE."""
    if a[2] < NEAR_PLANE and b[2] < NEAR_PLANE:
        return None
    if a[2] < NEAR_PLANE:
        a = a + (b - a) * (NEAR_PLANE - a[2]) / (b[2] - a[2])
    elif b[2] < NEAR_PLANE:
        b = b + (a - b) * (NEAR_PLANE - b[2]) / (a[2] - b[2])
    return a, b


def _draw_segment(img, p0, p1, color, width):
    h, w, _ = img.shape
    pad = width / 2.0 + 1.0
    x_lo = int(max(0, math.floor(min(p0[0], p1[0]) - pad)))
    x_hi = int(min(w, math.ceil(max(p0[0], p1[0]) + pad)))
    y_lo = int(max(0, math.floor(min(p0[1], p1[1]) - pad)))
    y_hi = int(min(h, math.ceil(max(p0[1], p1[1]) + pad)))
    if x_lo >= x_hi or y_lo >= y_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    px, py = xx + 0.5, yy + 0.5
    d = p1 - p0
    length2 = float(d @ d)
    if length2 > 0:
        s = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / length2, 0.0, 1.0)
    else:
        s = np.zeros_like(px, dtype=np.float64)
    dist = np.hypot(px - (p0[0] + s * d[0]), py - (p0[1] + s * d[1]))
    coverage = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    patch = img[y_lo:y_hi, x_lo:x_hi]
    np.maximum(patch, coverage[..., None] * color, out=patch)


def project_skeleton(joints, bones, camera: Camera) -> SkeletonImage:
    """Rasterize the skeleton seen from ``camera`` as colored anti-aliased bones.

    Bones crossing the near plane are clipped; raises DegenerateViewError
    when every joint lies behind the camera.
    """
    joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    pc = camera.to_camera(joints)
    if not np.any(pc[:, 2] >= NEAR_PLANE):
        raise DegenerateViewError("all skeleton joints are behind the camera")
    img = np.zeros((camera.height, camera.width, 3), dtype=np.float64)
    width = max(1.0, BONE_WIDTH_AT_512 * camera.height / 512.0)
    cx, cy = camera.principal_point
    f = camera.focal
    for idx, (i, j) in enumerate(bones):
        seg = _clip_to_near(pc[i], pc[j])
        if seg is None:
            continue
        ends = [np.array([f * p[0] / p[2] + cx, f * p[1] / p[2] + cy]) for p in seg]
        _draw_segment(img, ends[0], ends[1], BONE_PALETTE[idx % len(BONE_PALETTE)], width)
    return SkeletonImage(img)
