"""Checkpoint format: a JSON manifest plus a raw little-endian float32 blob.

<prefix>.json holds architecture, dims, policy, the tensor directory
(name/shape/byte offset into the blob) and all quantizer scalars;
<prefix>.bin is the concatenation of every tensor (parameters and
batchnorm running stats) as '<f4' bytes in directory order. Loading
rebuilds the model from the manifest and overwrites values bit-exactly.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ArtifactError
from .models import QuantPolicy, build_model
from .quantizer import QuantParams

FORMAT_NAME = "qfdlite-checkpoint"
FORMAT_VERSION = 1


def _entries(model):
    for name, tensor, _ in model.parameters():
        yield name, tensor.values
    for name, arr in model.state_arrays():
        yield name, arr


def _quantizer_manifest(q: QuantParams) -> dict:
    return {
        "bits": q.bits,
        "mode": q.mode,
        "lower": float(q.lower.values),
        "upper": float(q.upper.values),
        "scale": None if q.scale is None else float(q.scale.values),
        "initialized": q.initialized,
    }


def _restore_quantizer(q: QuantParams, entry: dict):
    q.lower.values[...] = entry["lower"]
    q.upper.values[...] = entry["upper"]
    if q.scale is not None:
        q.scale.values[...] = entry["scale"]
    q.initialized = bool(entry["initialized"])


def save_model(prefix: str, model, meta: dict | None = None):
    """Write <prefix>.json and <prefix>.bin."""
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    directory = []
    blobs = []
    offset = 0
    for name, arr in _entries(model):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "architecture": model.arch,
        "dims": model.dims,
        "policy": None if model.policy is None else model.policy.to_dict(),
        "tensors": directory,
        "quantizers": {name: _quantizer_manifest(q) for name, q in model.quantizers()},
        "meta": meta or {},
    }
    with open(prefix + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(prefix + ".bin", "wb") as fh:
        fh.write(b"".join(blobs))


def _read_manifest(prefix: str) -> tuple[dict, bytes]:
    json_path, bin_path = prefix + ".json", prefix + ".bin"
    for path in (json_path, bin_path):
        if not os.path.exists(path):
            raise ArtifactError(f"missing checkpoint file: {path}")
    with open(json_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME:
        raise ArtifactError(f"{json_path} is not a {FORMAT_NAME} manifest")
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    return manifest, blob


def load_model(prefix: str):
    """Rebuild the model named by <prefix>.json and fill it from the blob."""
    manifest, blob = _read_manifest(prefix)
    policy = manifest["policy"]
    if policy is not None:
        policy = QuantPolicy(**policy)
    model = build_model(manifest["architecture"], manifest["dims"], policy, seed=0)

    targets = dict(_entries(model))
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in targets:
            raise ArtifactError(f"checkpoint tensor {name!r} has no slot in the model")
        arr = targets[name]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        if tuple(entry["shape"]) != arr.shape:
            raise ArtifactError(
                f"checkpoint tensor {name!r} shape {entry['shape']} vs model {arr.shape}")
        arr[...] = data.reshape(arr.shape)
        seen.add(name)
    missing = set(targets) - seen
    if missing:
        raise ArtifactError(f"checkpoint is missing tensors: {sorted(missing)}")

    quantizers = dict(model.quantizers())
    for name, entry in manifest["quantizers"].items():
        if name not in quantizers:
            raise ArtifactError(f"checkpoint quantizer {name!r} has no slot in the model")
        _restore_quantizer(quantizers[name], entry)
    return model


def save_teacher_bundle(prefix: str, bundle, meta: dict | None = None):
    meta = dict(meta or {})
    meta["feature_quantizer"] = _quantizer_manifest(bundle.feature_quant)
    save_model(prefix, bundle.model, meta=meta)


def load_teacher_bundle(prefix: str):
    from .distill import TeacherBundle

    manifest, _ = _read_manifest(prefix)
    entry = manifest.get("meta", {}).get("feature_quantizer")
    if entry is None:
        raise ArtifactError(f"{prefix}.json is not a teacher bundle (no feature quantizer)")
    model = load_model(prefix)
    q = QuantParams(entry["bits"], entry["mode"],
                    scale=entry["scale"] if entry["scale"] is not None else None)
    _restore_quantizer(q, entry)
    return TeacherBundle(model, q)
