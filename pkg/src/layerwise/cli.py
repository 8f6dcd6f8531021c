"""Command-line entry point.

Subcommands: train-body, train-cloth, render, compose, transfer, gradcheck.
Exit codes: 0 success, 1 usage, 2 config or validation, 3 runtime
(provider, IO, training).
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, SceneHashWarning, load_checkpoint, save_checkpoint
from .config import RegWeights, TrainConfig, preset
from .deform import DeformedField, ScaledField, train_transfer
from .errors import CheckpointError, ConfigError, LayerwiseError, ProviderError, TrainingError
from .guidance import ENV_ENDPOINT, SyntheticProvider, ViewInfo, make_remote_provider
from .render import LayerStack, RenderedImage, render_image
from .scene import SceneConfig, derive_prompts, load_scene_file, orbit_camera
from .train import grad_check, gradcheck_closure, train_body, train_cloth

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# Image output

def quantize(color) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    c = np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0)
    return np.floor(c * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image, format: str | None = None) -> None:
    """Write RGB as binary PPM (P6) or, if Pillow is installed, PNG."""
    color = image.numpy()[0] if isinstance(image, RenderedImage) else np.asarray(image)
    if color.ndim != 3 or color.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {color.shape}")
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "ppm").lower()
    pixels = quantize(color)
    h, w, _ = pixels.shape
    if fmt == "ppm":
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    elif fmt == "png":
        try:
            from PIL import Image
        except ImportError as exc:
            raise ConfigError("PNG output needs Pillow; write .ppm instead", key="out") from exc
        Image.fromarray(pixels, "RGB").save(path, format="PNG")
    else:
        raise ConfigError(f"unsupported image format {fmt!r}", key="out")


def read_ppm(path) -> np.ndarray:
    """Binary P6 reader (maxval 255, no comments) returning floats in [0, 1]."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise ConfigError(f"{path} is not an 8-bit binary PPM", key="provider")
    w, h = int(parts[1]), int(parts[2])
    raw = parts[4]
    if len(raw) < w * h * 3:
        raise ConfigError(f"{path} is truncated", key="provider")
    return np.frombuffer(raw[: w * h * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0


# --------------------------------------------------------------------------
# Argument helpers

def parse_camera(text: str) -> dict:
    out = {"az": 0.0, "el": 0.0, "r": 2.5}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in out:
            raise ConfigError(f"expected az=,el=,r= entries, got {item!r}", key="camera")
        try:
            out[key] = float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}", key="camera") from None
    if out["r"] <= 0:
        raise ConfigError("r must be positive", key="camera")
    return out


def _stack_of(ck: Checkpoint) -> LayerStack:
    """Checkpoint layers with any stored deformation applied."""
    fields = []
    for name, f in zip(ck.stack.names, ck.stack.fields):
        d = ck.deforms.get(name)
        if d is None:
            fields.append(f)
        elif isinstance(d, float):
            fields.append(ScaledField(f, d))
        else:
            fields.append(DeformedField(f, d))
    return LayerStack(ck.stack.names, fields)


def _load(path, scene_hash: bytes, force: bool) -> Checkpoint:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SceneHashWarning)
        ck = load_checkpoint(path, scene_hash)
    if caught and not force:
        raise ConfigError(f"{caught[0].message}; pass --force to use it anyway", key="ckpt")
    return ck


def _merge(checkpoints: list[Checkpoint]) -> tuple[LayerStack, dict]:
    """Union of the layers in several checkpoints; identical copies of a layer collapse."""
    names, fields, source = [], [], {}
    for ci, ck in enumerate(checkpoints):
        stack = _stack_of(ck)
        for name, f in zip(stack.names, stack.fields):
            if name in source:
                other = fields[names.index(name)]
                if _state_bytes(other) != _state_bytes(f):
                    raise ConfigError(f"layer {name!r} appears with different weights in "
                                      f"checkpoints {source[name]} and {ci}", key="ckpt")
                continue
            source[name] = ci
            names.append(name)
            fields.append(f)
    return LayerStack(names, fields), source


def _state_bytes(module) -> bytes:
    return b"".join(t.detach().contiguous().numpy().tobytes() for _, t in sorted(module.state_dict().items()))


def _config_from(args) -> TrainConfig:
    cfg = preset(args.preset)
    if args.iters is not None:
        if args.iters <= 0:
            raise ConfigError("must be positive", key="iters")
        cfg = cfg.with_iterations(args.iters)
    if args.res is not None:
        if args.res <= 0:
            raise ConfigError("must be positive", key="res")
        cfg = replace(cfg, resolution_schedule=((max(cfg.iterations, 1), args.res),))
    reg = RegWeights(cfg.reg.lambda1 if args.lambda1 is None else args.lambda1,
                     cfg.reg.lambda2 if args.lambda2 is None else args.lambda2)
    cfg = replace(cfg, reg=reg, seed=cfg.seed if args.seed is None else args.seed,
                  th=cfg.th if args.th is None else args.th)
    return cfg


def _ensure_out(path) -> Path:
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise ConfigError(f"output directory {parent} does not exist", key="out")
    if not os.access(parent, os.W_OK):
        raise ConfigError(f"output directory {parent} is not writable", key="out")
    return path


def _ensure_file(path, key) -> Path:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path} does not exist", key=key)
    return path


class _Providers:
    """Resolves --provider into the body provider or the (composed, cloth-only) pair."""

    def __init__(self, spec: str | None, scene_hash: bytes, force: bool):
        spec = spec or (f"remote:{os.environ[ENV_ENDPOINT]}" if os.environ.get(ENV_ENDPOINT) else None)
        if spec is None:
            raise ConfigError(f"give --provider or set {ENV_ENDPOINT}", key="provider")
        kind, _, target = spec.partition(":")
        self.kind = kind
        if kind == "remote":
            self.remote = make_remote_provider(target or None)
        elif kind == "synthetic":
            path = _ensure_file(target, "provider")
            if path.suffix == ".tela":
                self.teacher = _stack_of(_load(path, scene_hash, force))
                self.image = None
            else:
                self.teacher = None
                self.image = read_ppm(path)
        else:
            raise ConfigError(f"expected synthetic:PATH or remote:URL, got {spec!r}", key="provider")

    def _render(self, names, mode, layer=None):
        stack = self.teacher.subset(names)

        def reference(view: ViewInfo):
            return render_image(stack, view.camera, mode, layer=layer, background=view.background,
                                window=view.window).color.detach()

        return SyntheticProvider(reference)

    def _teacher_names(self, names):
        missing = [n for n in names if n not in self.teacher.names]
        if missing:
            raise ConfigError(f"teacher checkpoint lacks layers {missing}", key="provider")
        return names

    def body(self, body_name: str):
        if self.kind == "remote":
            return self.remote
        if self.teacher is None:
            return SyntheticProvider(self.image)
        return self._render(self._teacher_names([body_name]), "composed")

    def cloth(self, names: list[str]):
        if self.kind == "remote":
            return self.remote, self.remote
        if self.teacher is None:
            return SyntheticProvider(self.image), SyntheticProvider(self.image)
        names = self._teacher_names(names)
        return self._render(names, "composed"), self._render(names, "cloth-only", len(names) - 1)


def _progress(label, it, report, elapsed):
    terms = " ".join(f"{k}={v:.6g}" for k, v in report.as_dict().items() if k not in ("resolution", "t"))
    print(f"[{label}] it={it} res={report.resolution} {terms} elapsed={elapsed:.1f}s",
          file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# Commands

def cmd_train_body(args, scene: SceneConfig):
    cfg = _config_from(args)
    out = _ensure_out(args.out)
    provider = _Providers(args.provider, scene.hash(), args.force).body(scene.body.name)
    field, _ = train_body(scene, cfg, provider, progress=_progress)
    save_checkpoint(out, LayerStack([scene.body.name], [field]), scene.hash(),
                    config=cfg.to_dict())


def cmd_train_cloth(args, scene: SceneConfig):
    if not args.layer:
        raise UsageError("train-cloth needs --layer NAME")
    name = args.layer
    spec = scene.layer(name)
    if spec.is_body:
        raise ConfigError("the body is trained with train-body", key="layer")
    if len(args.ckpt) != 1:
        raise UsageError("train-cloth takes exactly one --ckpt holding the inner layers")
    cfg = _config_from(args)
    out = _ensure_out(args.out)
    ck = _load(_ensure_file(args.ckpt[0], "ckpt"), scene.hash(), args.force)
    expected = [layer.name for layer in scene.layers[: scene.layer_index(name)]]
    if ck.stack.names != expected:
        raise ConfigError(f"layer {name!r} needs inner layers {expected}, checkpoint has "
                          f"{ck.stack.names}", key="ckpt")
    providers = _Providers(args.provider, scene.hash(), args.force).cloth(expected + [name])
    field, _ = train_cloth(scene, _stack_of(ck), name, cfg, providers, progress=_progress)
    save_checkpoint(out, ck.stack.with_layer(name, field), scene.hash(),
                    optimizers=ck.optimizers, config=cfg.to_dict(), deforms=ck.deforms)


def _camera(args, scene: SceneConfig):
    cam = parse_camera(args.camera or "")
    res = args.res or 256
    return orbit_camera(cam["az"], cam["el"], cam["r"], (res, res), scene.camera_dist.fov_y,
                        scene.camera_dist.look_at)


def _render_stack(stack: LayerStack, args, camera) -> RenderedImage:
    mode = args.mode
    th = 0.5 if args.th is None else args.th
    layer = None
    if mode == "cloth-only":
        name = args.layer or stack.names[-1]
        layer = stack.index(name)
        if layer == 0:
            raise ConfigError("cloth-only rendering needs a garment layer", key="layer")
    with torch.no_grad():
        return render_image(stack, camera, mode, layer=layer, th=th, background=1.0, n_samples=128)


def cmd_render(args, scene: SceneConfig):
    if len(args.ckpt) < 1:
        raise UsageError("render needs --ckpt")
    out = _ensure_out(args.out)
    cks = [_load(_ensure_file(p, "ckpt"), scene.hash(), args.force) for p in args.ckpt]
    stack, _ = _merge(cks)
    if args.layers:
        stack = _subset(stack, args.layers.split(","))
    write_image(out, _render_stack(stack, args, _camera(args, scene)))


def _subset(stack: LayerStack, names):
    names = [n.strip() for n in names if n.strip()]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate layer names in {names}", key="layers")
    try:
        return stack.subset(names)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), key="layers") from None


def compose_command(checkpoints: list[Checkpoint], slots: list[list[str]], camera, th: float = 0.5,
                    n_samples: int = 128) -> list[tuple[list[str], RenderedImage]]:
    """Render every inner-to-outer combination of the given layer slots.

    Each slot lists interchangeable layers; the first slot is normally the
    body. Returns (layer names, image) per combination in slot order.
    """
    stack, _ = _merge(checkpoints)
    results = []
    for combo in itertools.product(*slots):
        sub = _subset(stack, list(combo))
        with torch.no_grad():
            img = render_image(sub, camera, "composed", th=th, background=1.0, n_samples=n_samples)
        results.append((list(combo), img))
    return results


def cmd_compose(args, scene: SceneConfig):
    if not args.ckpt:
        raise UsageError("compose needs at least one --ckpt")
    out = _ensure_out(args.out)
    paths = [_ensure_file(p, "ckpt") for p in args.ckpt]
    cks = [load_checkpoint(p) for p in paths]
    hashes = {str(p): ck.scene_hash for p, ck in zip(paths, cks)}
    if not args.force:
        distinct = {h for h in hashes.values()}
        if len(distinct) > 1 or scene.hash() not in distinct:
            lines = ", ".join(f"{p}={h.hex()[:12]}" for p, h in hashes.items())
            raise ConfigError(f"scene hash conflict (scene {scene.hash().hex()[:12]}; {lines}); "
                              "pass --force to compose anyway", key="ckpt")
    if args.layer:
        slots = [s.split("|") for s in args.layer]
    elif args.layers:
        slots = [[n] for n in args.layers.split(",")]
    else:
        slots = [[n] for n in _merge(cks)[0].names]
    th = 0.5 if args.th is None else args.th
    results = compose_command(cks, slots, _camera(args, scene), th)
    if len(results) == 1:
        write_image(out, results[0][1])
        return
    for names, img in results:
        write_image(out.with_name(f"{out.stem}_{'+'.join(names)}{out.suffix or '.ppm'}"), img)


def cmd_transfer(args, scene: SceneConfig):
    if len(args.ckpt) != 2 or not args.layer:
        raise UsageError("transfer needs --ckpt TARGET --ckpt SOURCE --layer NAME")
    out = _ensure_out(args.out)
    target = _load(_ensure_file(args.ckpt[0], "ckpt"), scene.hash(), args.force)
    source = _load(_ensure_file(args.ckpt[1], "ckpt"), scene.hash(), True)
    name = args.layer
    if name not in source.stack.names:
        raise ConfigError(f"source checkpoint has no layer {name!r}", key="layer")
    if name in target.stack.names:
        raise ConfigError(f"target already has a layer {name!r}", key="layer")
    cloth = source.stack.fields[source.stack.index(name)]
    deforms = dict(target.deforms)
    if args.scale is not None:
        if args.scale <= 0:
            raise ConfigError("must be positive", key="scale")
        deforms[name] = float(args.scale)
    else:
        cfg = _config_from(args)
        if args.iters is not None:
            cfg = replace(cfg, transfer_iterations=args.iters)
        prompts = derive_prompts(scene.base_prompt, scene.layers)
        try:
            pair = (prompts.composed[name], prompts.cloth_only[name])
        except KeyError:
            raise ConfigError(f"scene has no garment {name!r}", key="layer") from None
        providers = _Providers(args.provider, scene.hash(), args.force).cloth(target.stack.names + [name])
        deform, _ = train_transfer(cloth, _stack_of(target), pair, providers, cfg, scene,
                                   progress=_progress)
        deforms[name] = deform
    save_checkpoint(out, target.stack.with_layer(name, cloth), target.scene_hash,
                    optimizers=target.optimizers, config=target.config, deforms=deforms)


def cmd_gradcheck(args, scene):
    seed = 0 if args.seed is None else args.seed
    closure, params = gradcheck_closure(seed=seed, res=args.res or 4)
    report = grad_check(closure, params, sample_fraction=0.0, min_samples=args.samples, seed=seed)
    print(json.dumps({"max_rel_err": report.max_rel_err, "worst": report.worst_parameter,
                      "n_checked": report.n_checked, "tolerance": report.tolerance,
                      "passed": report.passed}))
    return EXIT_OK if report.passed else EXIT_RUNTIME


COMMANDS = {
    "train-body": cmd_train_body,
    "train-cloth": cmd_train_cloth,
    "render": cmd_render,
    "compose": cmd_compose,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="layerwise", description="Layered clothed-figure radiance fields")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        needs_scene = name != "gradcheck"
        p.add_argument("--scene", required=needs_scene, help="scene JSON")
        if name in ("gradcheck",):
            p.add_argument("--samples", type=int, default=200, help="parameters to probe")
        else:
            p.add_argument("--out", required=True)
        p.add_argument("--ckpt", action="append", default=[])
        p.add_argument("--layer", action="append" if name == "compose" else "store",
                       help="layer name (compose: repeatable, 'a|b' lists alternatives)")
        p.add_argument("--layers", help="comma-separated inner-to-outer layer names")
        p.add_argument("--iters", type=int)
        p.add_argument("--res", type=int)
        p.add_argument("--th", type=float)
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--provider", help="synthetic:PATH(.ppm|.tela) or remote:URL")
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("--mode", choices=("composed", "cloth-only", "baseline-max"), default="composed")
        p.add_argument("--camera", help="az=DEG,el=DEG,r=DIST")
        p.add_argument("--scale", type=float, help="transfer: uniform resize instead of a trained deformation")
        p.add_argument("--force", action="store_true", help="accept scene-hash mismatches")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        scene = load_scene_file(_ensure_file(args.scene, "scene")) if args.scene else None
        code = COMMANDS[args.command](args, scene)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProviderError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (LayerwiseError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
