"""Binary checkpoint format.

Layout (little-endian)::

    b"TELA" | version: u32 | scene hash: 32 bytes
    repeated: name length: u32 | name: utf-8 | count: u64 | count x f32
    CRC32 of everything above: u32

Parameter blocks are named ``layer/<layer>/<param>``, optimizer moments
``optim/<layer>/<param>/{m,v}`` plus ``optim/<layer>/step``, and
deformation weights ``deform/<layer>/<param>`` (or ``deform/<layer>/scale``
for a uniform resize). A ``meta/json`` block carries the layer
architectures and config snapshot as UTF-8 bytes stored one per value.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .deform import DeformationField
from .errors import CheckpointError
from .field import GridSpec, MlpSpec, RadianceField
from .render import LayerStack
from .scene import AABB
from .train import OptimizerState

MAGIC = b"TELA"
FORMAT_VERSION = 1
HASH_BYTES = 32
META_BLOCK = "meta/json"


class SceneHashWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    scene_hash: bytes
    stack: LayerStack
    optimizers: dict = field(default_factory=dict)
    config: dict | None = None
    deforms: dict = field(default_factory=dict)


def _field_meta(f: RadianceField) -> dict:
    return {
        "grid": asdict(f.grid_spec),
        "mlp": {"hidden": list(f.mlp_spec.hidden)},
        "aabb": f.aabb.to_dict(),
    }


def _deform_meta(d) -> dict:
    if isinstance(d, (int, float)):
        return {"kind": "scale", "scale": float(d)}
    return {"kind": "mlp", "n_freqs": d.n_freqs, "hidden": list(d.hidden), "max_offset": d.max_offset}


def encode_blocks(scene_hash: bytes, blocks) -> bytes:
    if len(scene_hash) != HASH_BYTES:
        raise ValueError("scene hash must be 32 bytes")
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += scene_hash
    for name, values in blocks:
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(np.asarray(values, dtype="<f4").reshape(-1))
        out += struct.pack("<I", len(raw_name)) + raw_name
        out += struct.pack("<Q", arr.size) + arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_blocks(data: bytes):
    """Returns (version, scene hash, list of (name, float32 array))."""
    if len(data) < 4 + 4 + HASH_BYTES + 4:
        raise CheckpointError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes {data[:4]!r}; not a checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch; checkpoint is truncated or corrupted")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    scene_hash = data[8:8 + HASH_BYTES]
    pos, end = 8 + HASH_BYTES, len(data) - 4
    blocks = []
    while pos < end:
        if pos + 4 > end:
            raise CheckpointError("truncated block header")
        (n,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        if pos + 8 > end:
            raise CheckpointError("truncated block header")
        (count,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        if pos + 4 * count > end:
            raise CheckpointError(f"block {name!r} is truncated")
        blocks.append((name, np.frombuffer(data, dtype="<f4", count=count, offset=pos).copy()))
        pos += 4 * count
    return version, scene_hash, blocks


def save_checkpoint(path, stack: LayerStack, scene_hash: bytes = bytes(HASH_BYTES),
                    optimizers: dict | None = None, config: dict | None = None,
                    deforms: dict | None = None) -> None:
    """Write atomically (temp file, then rename)."""
    optimizers = optimizers or {}
    deforms = deforms or {}
    layers_meta = []
    blocks = []
    for name, f in zip(stack.names, stack.fields):
        if not isinstance(f, RadianceField):
            raise TypeError(f"layer {name!r} is not a RadianceField and cannot be saved")
        layers_meta.append({"name": name, **_field_meta(f)})
        for pname, tensor in f.state_dict().items():
            blocks.append((f"layer/{name}/{pname}", tensor.detach().cpu().numpy()))
    for name, state in optimizers.items():
        for pname in state.m:
            blocks.append((f"optim/{name}/{pname}/m", state.m[pname].detach().cpu().numpy()))
            blocks.append((f"optim/{name}/{pname}/v", state.v[pname].detach().cpu().numpy()))
        blocks.append((f"optim/{name}/step", np.array([state.step])))
    deform_meta = {}
    for name, d in deforms.items():
        deform_meta[name] = _deform_meta(d)
        if isinstance(d, (int, float)):
            blocks.append((f"deform/{name}/scale", np.array([d])))
        else:
            for pname, tensor in d.state_dict().items():
                blocks.append((f"deform/{name}/{pname}", tensor.detach().cpu().numpy()))
    meta = json.dumps({"layers": layers_meta, "config": config, "deforms": deform_meta},
                      sort_keys=True).encode("utf-8")
    blocks.insert(0, (META_BLOCK, np.frombuffer(meta, dtype=np.uint8).astype(np.float32)))
    payload = encode_blocks(scene_hash, blocks)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_hash: bytes | None = None) -> Checkpoint:
    """Read a checkpoint, warning with SceneHashWarning if ``expected_hash`` differs."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    _, scene_hash, blocks = decode_blocks(data)
    if expected_hash is not None and scene_hash != expected_hash:
        warnings.warn(f"checkpoint {path} was written for a different scene "
                      f"(hash {scene_hash.hex()[:12]} != {expected_hash.hex()[:12]})",
                      SceneHashWarning, stacklevel=2)
    table = dict(blocks)
    if META_BLOCK not in table:
        raise CheckpointError("checkpoint has no metadata block")
    meta = json.loads(table[META_BLOCK].astype(np.uint8).tobytes().decode("utf-8"))

    def tensor(name, like):
        if name not in table:
            raise CheckpointError(f"missing block {name!r}")
        arr = table[name]
        if arr.size != like.numel():
            raise CheckpointError(f"block {name!r} has {arr.size} values, expected {like.numel()}")
        return torch.from_numpy(arr.reshape(tuple(like.shape))).to(like.dtype)

    names, fields = [], []
    for lm in meta["layers"]:
        aabb = AABB(tuple(lm["aabb"]["min"]), tuple(lm["aabb"]["max"]))
        f = RadianceField(GridSpec(**lm["grid"]), MlpSpec(tuple(lm["mlp"]["hidden"])), aabb)
        state = {k: tensor(f"layer/{lm['name']}/{k}", v) for k, v in f.state_dict().items()}
        f.load_state_dict(state)
        names.append(lm["name"])
        fields.append(f)
    stack = LayerStack(names, fields)

    optimizers = {}
    for name, f in zip(names, fields):
        step_key = f"optim/{name}/step"
        if step_key in table:
            st = OptimizerState(step=int(table[step_key][0]))
            for pname, p in f.named_parameters():
                st.m[pname] = tensor(f"optim/{name}/{pname}/m", p)
                st.v[pname] = tensor(f"optim/{name}/{pname}/v", p)
            optimizers[name] = st

    deforms = {}
    for name, dm in meta.get("deforms", {}).items():
        if dm["kind"] == "scale":
            deforms[name] = float(table[f"deform/{name}/scale"][0])
        else:
            d = DeformationField(dm["n_freqs"], tuple(dm["hidden"]), dm["max_offset"])
            d.load_state_dict({k: tensor(f"deform/{name}/{k}", v) for k, v in d.state_dict().items()})
            deforms[name] = d
    return Checkpoint(scene_hash, stack, optimizers, meta.get("config"), deforms)
