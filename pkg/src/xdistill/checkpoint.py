"""Checkpoint persistence.

A checkpoint is a directory with ``manifest.json`` and ``params.bin``. The
blob holds little-endian float32 values concatenated in manifest order; the
manifest records shapes, offsets, the model config, the training step and a
sha256 of the blob. In-memory masters stay float64, so a round trip loses at
most one float32 rounding per value.

Bit-exact resumption needs more than float32 weights, so loops that can be
interrupted also write ``resume.npz`` (float64 params, optimizer moments and
the generator state).
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import ArtifactError
from .model import EncoderModel, ModelConfig

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "params.bin"
RESUME = "resume.npz"
DTYPE = np.dtype("<f4")


def _code_version():
    from . import __version__

    return __version__


def save(model, path, step=0, rng_state=None, extra=None):
    """Write ``model`` to directory ``path``; returns the manifest dict."""
    os.makedirs(path, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype=DTYPE)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "code_version": _code_version(),
        "config": model.config.to_dict(),
        "num_classes": model.num_classes,
        "step": int(step),
        "rng_state": rng_state,
        "dtype": "float32-le",
        "num_values": offset,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "params": index,
        "extra": extra or {},
    }
    _atomic_write(os.path.join(path, BLOB), blob)
    _atomic_write(os.path.join(path, MANIFEST), (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return manifest


def read_manifest(path):
    file = os.path.join(path, MANIFEST)
    try:
        with open(file) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ArtifactError(f"no checkpoint at {path} (missing {MANIFEST})") from None
    except json.JSONDecodeError as e:
        raise ArtifactError(f"corrupt manifest {file}: {e}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(f"{file}: unsupported schema_version {manifest.get('schema_version')!r}")
    return manifest


def load(path):
    """Return (model, manifest). Raises ArtifactError on any mismatch."""
    manifest = read_manifest(path)
    try:
        with open(os.path.join(path, BLOB), "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        raise ArtifactError(f"checkpoint {path} has no {BLOB}") from None
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ArtifactError(f"checksum mismatch in {path}/{BLOB}")
    values = np.frombuffer(blob, dtype=DTYPE)
    if values.size != manifest["num_values"]:
        raise ArtifactError(f"blob has {values.size} values, manifest says {manifest['num_values']}")
    params = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start + n > values.size:
            raise ArtifactError(f"parameter {entry['name']} runs past the end of the blob")
        params[entry["name"]] = values[start:start + n].reshape(shape).astype(np.float64)
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except Exception as e:
        raise ArtifactError(f"bad model config in {path}: {e}") from None
    return EncoderModel.from_arrays(config, params, manifest.get("num_classes", 0)), manifest


def save_resume(path, model, optimizer, rng, step, history=()):
    """Exact float64 snapshot for bit-for-bit continuation."""
    arrays = {f"p/{k}": t.data for k, t in model.params.items()}
    arrays.update({f"m/{k}": v for k, v in optimizer.m.items()})
    arrays.update({f"v/{k}": v for k, v in optimizer.v.items()})
    arrays["history"] = np.asarray(list(history), dtype=np.float64)
    meta = {"step": int(step), "opt_step": optimizer.step_count, "rng": rng.bit_generator.state}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = os.path.join(path, RESUME + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, os.path.join(path, RESUME))


def load_resume(path, model, optimizer):
    """Restore state written by ``save_resume`` in place; returns (step, rng, history)."""
    file = os.path.join(path, RESUME)
    try:
        data = np.load(file)
    except FileNotFoundError:
        raise ArtifactError(f"nothing to resume: {file} does not exist") from None
    except (OSError, ValueError) as e:
        raise ArtifactError(f"corrupt resume file {file}: {e}") from None
    with data:
        meta = json.loads(bytes(data["meta"]).decode())
        for k, t in model.params.items():
            key = f"p/{k}"
            if key not in data:
                raise ArtifactError(f"resume file lacks parameter {k}")
            t.data = data[key].copy()
        optimizer.load_state_dict({
            "step_count": meta["opt_step"],
            "m": {k[2:]: data[k] for k in data.files if k.startswith("m/")},
            "v": {k[2:]: data[k] for k in data.files if k.startswith("v/")},
        })
        history = data["history"].tolist()
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng"]
    return meta["step"], rng, history


def _atomic_write(file, payload):
    tmp = file + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, file)
