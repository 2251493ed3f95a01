"""Bit-exact on-disk tensor container.

A bundle is a directory holding ``manifest.json`` plus one raw payload
file per tensor.  Payloads are row-major little-endian bytes with no
header, so a round-trip preserves every bit and any language can parse
them from the manifest alone:

    {
      "version": 1,
      "tensors": [{"name", "dtype": "f32"|"u8", "shape", "file"}, ...],
      "annotations": [...],        # optional, per-phrase metadata
      "config": {...}              # optional, e.g. model hyperparameters
    }

Validation on read names the offending tensor entry in every error.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
BUNDLE_VERSION = 1

# explicit little-endian codes; native '=f4' would break on BE platforms
DTYPE_CODES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class BundleError(ValueError):
    """Malformed bundle: bad manifest, size mismatch, or missing payload."""


def _dtype_code(arr: np.ndarray, name: str) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.uint8:
        return "u8"
    raise BundleError(f"tensor {name!r} has unsupported dtype {arr.dtype}; "
                      f"bundles hold f32 or u8")


def write_tensors(path, tensors: dict[str, np.ndarray],
                  annotations: list[dict] | None = None,
                  config: dict | None = None) -> None:
    """Write arrays and optional metadata as a bundle directory at `path`."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in tensors.items():
        if "/" in name or "\\" in name:
            raise BundleError(f"tensor name {name!r} may not contain path separators")
        code = _dtype_code(arr, name)
        fname = name + ".bin"
        payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
        (root / fname).write_bytes(payload)
        entries.append({"name": name, "dtype": code,
                        "shape": list(arr.shape), "file": fname})
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise BundleError("duplicate tensor names in bundle")
    manifest = {"version": BUNDLE_VERSION, "tensors": entries}
    if annotations is not None:
        manifest["annotations"] = annotations
    if config is not None:
        manifest["config"] = config
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n",
                                      encoding="utf-8")


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a bundle directory; returns (tensors by name, full manifest).

    Every entry is validated: known dtype, payload present, byte length
    equal to product(shape) * itemsize.
    """
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise BundleError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise BundleError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("version") != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {manifest.get('version')!r}")
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise BundleError("manifest has no tensor list")

    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise BundleError(f"manifest entry without a valid name: {entry!r}")
        if name in tensors:
            raise BundleError(f"duplicate tensor name {name!r}")
        code = entry.get("dtype")
        if code not in DTYPE_CODES:
            raise BundleError(f"tensor {name!r} has unknown dtype {code!r}")
        dtype = DTYPE_CODES[code]
        shape = tuple(entry.get("shape", ()))
        if not all(isinstance(s, int) and s >= 0 for s in shape):
            raise BundleError(f"tensor {name!r} has invalid shape {shape!r}")
        fpath = root / entry.get("file", "")
        if not fpath.is_file():
            raise BundleError(f"tensor {name!r}: missing payload file "
                              f"{entry.get('file')!r}")
        raw = fpath.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) != expected:
            raise BundleError(f"tensor {name!r}: payload is {len(raw)} bytes, "
                              f"expected {expected} for shape {list(shape)} "
                              f"dtype {code}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return tensors, manifest
