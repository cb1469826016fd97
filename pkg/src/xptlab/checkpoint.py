"""Binary checkpoint container.

Layout::

    b"XPTLAB" + two-digit version (8 bytes)
    manifest length, uint64 little-endian
    manifest, UTF-8 JSON with sorted keys
    float64 little-endian payloads, in the order the manifest lists them

The manifest records each tensor's shape, offset and SHA-256, plus a digest of
the whole payload block. Writing the result of a read reproduces the file byte
for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, ModelConfig, param_shapes
from .errors import BadMagicError, ChecksumError, CheckpointError, UnsupportedVersionError
from .prompts import INIT_SCHEME, DeepPrompt
from .tuning import Checkpoint, Hyper

MAGIC_PREFIX = b"XPTLAB"
VERSION = 1
MAGIC = MAGIC_PREFIX + f"{VERSION:02d}".encode()
_LEN = struct.Struct("<Q")


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(ckpt.params.arrays.items())
    if ckpt.prompt is not None:
        out.extend(ckpt.prompt.named().items())
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = _tensors(ckpt)
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "count": int(arr.size), "sha256": hashlib.sha256(blob).hexdigest()})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    manifest = {
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "hyper": None if ckpt.hyper is None else ckpt.hyper.to_dict(),
        "seed": int(ckpt.seed),
        "prompt_length": None if ckpt.prompt is None else ckpt.prompt.length,
        "init_scheme": INIT_SCHEME,
        "ratios": ckpt.ratios(),
        "backbone_sha256": ckpt.params.backbone_checksum(),
        "tensors": entries,
        "param_count": int(sum(e["count"] for e in entries)),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "extra": ckpt.manifest,
    }
    head = _canonical_json(manifest)
    return MAGIC + _LEN.pack(len(head)) + head + payload


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 16 or raw[:6] != MAGIC_PREFIX:
        raise BadMagicError(f"{source}: not an xptlab checkpoint")
    try:
        version = int(raw[6:8].decode("ascii"))
    except ValueError:
        raise BadMagicError(f"{source}: unreadable version field {raw[6:8]!r}") from None
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: version {version}, this build reads {VERSION}")
    (n,) = _LEN.unpack_from(raw, 8)
    start = 16 + n
    if start > len(raw):
        raise ChecksumError(f"{source}: manifest length {n} runs past end of file")
    try:
        manifest = json.loads(raw[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{source}: manifest is corrupt ({exc})") from None
    payload = raw[start:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise ChecksumError(f"{source}: payload checksum mismatch")
    arrays = {}
    for e in manifest["tensors"]:
        blob = payload[e["offset"]:e["offset"] + 8 * e["count"]]
        if len(blob) != 8 * e["count"] or hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise ChecksumError(f"{source}: checksum mismatch in tensor {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(e["shape"])
    if 8 * sum(e["count"] for e in manifest["tensors"]) != len(payload):
        raise ChecksumError(f"{source}: payload size disagrees with manifest")
    cfg = ModelConfig.from_dict(manifest["config"])
    model_names = list(param_shapes(cfg))
    missing = [k for k in model_names if k not in arrays]
    if missing:
        raise CheckpointError(f"{source}: missing tensors {missing[:3]}")
    params = EncoderParams(cfg, {k: arrays[k] for k in arrays if not k.startswith("prompt")})
    prompt_arrays = {k: v for k, v in arrays.items() if k.startswith("prompt")}
    prompt = DeepPrompt.from_named(prompt_arrays) if prompt_arrays else None
    hyper = None if manifest["hyper"] is None else Hyper.from_dict(manifest["hyper"])
    return Checkpoint(cfg, params, prompt, hyper, int(manifest["seed"]), manifest.get("extra", {}))


def read_manifest(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC_PREFIX:
        raise BadMagicError(f"{path}: not an xptlab checkpoint")
    (n,) = _LEN.unpack_from(raw, 8)
    return json.loads(raw[16:16 + n].decode("utf-8"))


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: the file appears complete or not at all."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), str(path))


def backbone_bytes(params: EncoderParams) -> bytes:
    """Serialized backbone tensors (head excluded), for freeze comparisons."""
    return b"".join(np.ascontiguousarray(params.arrays[n], dtype="<f8").tobytes() for n in params.backbone_names)
