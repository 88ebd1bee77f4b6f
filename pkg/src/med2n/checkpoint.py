"""Versioned binary checkpoint container.

Layout::

    8 bytes   magic  b"MED2NCK\\0"
    4 bytes   format version, little-endian uint32
    8 bytes   manifest length N, little-endian uint64
    N bytes   UTF-8 JSON manifest (role, architecture, entries, rng state, ...)
    ...       raw little-endian float32 blobs in manifest order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .data import Benchmark
from .errors import CheckpointError, MissingPrerequisiteError
from .trainer import ModelBundle, TrainConfig, new_bundle

MAGIC = b"MED2NCK\0"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def encode(bundle: ModelBundle, extra: dict | None = None, rng_state: dict | None = None) -> bytes:
    arrays = bundle.named_arrays()
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        if arr.dtype != np.float32:
            raise CheckpointError(f"checkpoints store float32 only; {name} is {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    net = bundle.net
    manifest = {
        "version": VERSION,
        "role": bundle.role,
        "architecture": {
            "channels": [s.out_channels for s in net.specs],
            "decompose_depth": net.decompose_depth,
            "input_shape": list(net.input_shape),
        },
        "classifiers": {dom: list(map(int, c.class_ids)) for dom, c in bundle.classifiers.items()},
        "optimizer": {"step": bundle.optimizer.state.step, "lr": bundle.optimizer.lr},
        "rng_state": rng_state,
        "entries": entries,
        **(extra or {}),
    }
    text = json.dumps(manifest, sort_keys=True).encode()
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(blobs)


def save_checkpoint(path, bundle: ModelBundle, extra: dict | None = None, rng_state: dict | None = None) -> Path:
    atomic_write_bytes(Path(path), encode(bundle, extra, rng_state))
    return Path(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingPrerequisiteError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (expected {VERSION})")
    manifest = json.loads(raw[_HEADER.size:_HEADER.size + n])
    base = _HEADER.size + n
    arrays = {}
    for e in manifest["entries"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: blob {e['name']} truncated")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return manifest, arrays


def load_checkpoint(path, config: TrainConfig, bench: Benchmark) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle from disk. Architecture comes from the manifest, not ``config``."""
    manifest, arrays = read_checkpoint(path)
    arch = manifest["architecture"]
    cfg = TrainConfig(**{**config.__dict__, "channels": tuple(arch["channels"])})
    if tuple(arch["input_shape"]) != (3, bench.spec.image_size, bench.spec.image_size):
        raise CheckpointError(f"{path}: trained on inputs {arch['input_shape']}, benchmark images are "
                              f"{bench.spec.image_size}px")
    bundle = new_bundle(manifest["role"], cfg, bench, decompose_depth=arch["decompose_depth"])
    bundle.optimizer.lr = manifest["optimizer"]["lr"]
    targets = bundle.named_arrays()
    if set(targets) != set(arrays):
        missing = sorted(set(targets) ^ set(arrays))
        raise CheckpointError(f"{path}: parameter set mismatch ({missing[:4]}...)")
    for name, target in targets.items():
        if target.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name]
    bundle.optimizer.state.step = manifest["optimizer"]["step"]
    for dom, ids in manifest["classifiers"].items():
        if list(map(int, bundle.classifiers[dom].class_ids)) != ids:
            raise CheckpointError(f"{path}: {dom} classifier classes differ from the benchmark's")
    bundle.net.eval()
    return bundle, manifest
