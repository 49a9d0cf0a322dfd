"""
serialization.py — Tensor bundles: a JSON manifest plus a flat little-endian payload.

``<stem>.json`` lists every array (name, shape, dtype, byte offset, byte
length) and free-form metadata; ``<stem>.bin`` holds the arrays back to back.
Layout is documented byte-exact in docs/FILE_FORMATS.md.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from config import BUNDLE_FORMAT
from errors import DataFormatError

# Wire dtypes are always explicit little-endian.
WIRE_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4"}


def _wire_name(array: np.ndarray) -> str:
    if np.issubdtype(array.dtype, np.integer):
        return "int32"
    if array.dtype == np.float64:
        return "float64"
    return "float32"


def write_payload(path: str, arrays: dict[str, np.ndarray]) -> list[dict[str, Any]]:
    """Write ``arrays`` back to back into ``path``; returns their manifest entries."""
    entries = []
    offset = 0
    with open(path, "wb") as f:
        for name, array in arrays.items():
            dtype = _wire_name(array)
            payload = np.ascontiguousarray(array, dtype=WIRE_DTYPES[dtype]).tobytes()
            f.write(payload)
            entries.append({
                "name": name,
                "shape": list(array.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(payload),
            })
            offset += len(payload)
    return entries


def write_bundle(directory: str, stem: str, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = write_payload(os.path.join(directory, f"{stem}.bin"), arrays)
    manifest = {"format": BUNDLE_FORMAT, "arrays": entries, "meta": meta or {}}
    with open(os.path.join(directory, f"{stem}.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_manifest(path: str) -> dict[str, Any]:
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataFormatError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}:{exc.lineno}:{exc.colno}: malformed manifest ({exc.msg})") from None
    if not isinstance(manifest, dict):
        raise DataFormatError(f"{path}: manifest must be a JSON object")
    return manifest


def read_payload(path: str, entries: list[dict[str, Any]], manifest_path: str) -> dict[str, np.ndarray]:
    """Read the arrays ``entries`` describe from ``path``; errors name the manifest or payload and the array."""
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: payload not found") from None

    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry.get("name", "?")
        try:
            shape = tuple(int(s) for s in entry["shape"])
            wire = WIRE_DTYPES[entry["dtype"]]
            offset = int(entry["offset"])
            nbytes = int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise DataFormatError(f"{manifest_path}: array {name!r} has an incomplete or invalid entry") from None
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(wire).itemsize
        if expected != nbytes:
            raise DataFormatError(
                f"{manifest_path}: array {name!r} shape {list(shape)} needs {expected} bytes, manifest says {nbytes}"
            )
        if offset + nbytes > len(payload):
            raise DataFormatError(
                f"{path}: array {name!r} truncated ({max(len(payload) - offset, 0)} of {nbytes} bytes present)"
            )
        array = np.frombuffer(payload, dtype=wire, count=nbytes // np.dtype(wire).itemsize, offset=offset)
        arrays[name] = array.reshape(shape).astype(np.dtype(wire).newbyteorder("="))
    return arrays


def read_bundle(directory: str, stem: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    manifest_path = os.path.join(directory, f"{stem}.json")
    manifest = read_manifest(manifest_path)
    if manifest.get("format") != BUNDLE_FORMAT:
        raise DataFormatError(f"{manifest_path}: unsupported bundle format {manifest.get('format')!r}")
    arrays = read_payload(os.path.join(directory, f"{stem}.bin"), manifest.get("arrays", []), manifest_path)
    return arrays, manifest.get("meta", {})
