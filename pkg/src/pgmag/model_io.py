"""Single-file model container: text header, checksummed binary payload.

Layout:

    line 1   magic + format version, e.g. ``PGMAG-MODEL 1``
    line 2   header byte length (decimal)
    header   JSON: architecture, layout, array directory, provenance,
             payload length and SHA-256
    payload  raw little-endian bytes of every array, at the offsets the
             directory declares

Weights, biases, and scaler bounds are stored as float64 so a load
reproduces a save bit-exactly; masks are bit-packed.  Writes go through a
temporary file and an atomic rename, and the checksum covers the whole
payload, so a partial or corrupted write can never load successfully.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .dataset import MinMaxScaler
from .nn_core import Mlp
from .physics import TargetLayout, TARGET_FIELDS

__all__ = ["save", "load", "ModelIoError", "ChecksumError",
           "UnsupportedVersionError", "FORMAT_VERSION"]

MAGIC = "PGMAG-MODEL"
FORMAT_VERSION = 1


class ModelIoError(ValueError):
    """Structurally invalid model file."""


class ChecksumError(ModelIoError):
    """Payload bytes do not match the recorded digest."""


class UnsupportedVersionError(ModelIoError):
    pass


def _mask_bytes(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8).ravel()).tobytes()


def _mask_from_bytes(raw: bytes, shape) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8),
                         count=int(np.prod(shape)))
    return flat.reshape(shape).astype(bool)


def save(model: Mlp, scalers: dict[str, MinMaxScaler] | None, meta: dict | None,
         path) -> Path:
    """Write the model, named scalers, and provenance metadata to ``path``.

    ``meta`` must be JSON-serializable (seed, loss weighting, prune scheme,
    ratio, alpha, and whatever else identifies the run).
    """
    scalers = scalers or {}
    meta = meta or {}
    try:
        json.dumps(meta)
    except TypeError as exc:
        raise ModelIoError(f"meta must be JSON-serializable: {exc}") from exc

    directory = []
    chunks = []
    offset = 0

    def add(name: str, raw: bytes, shape, dtype: str):
        nonlocal offset
        directory.append({"name": name, "shape": list(shape), "dtype": dtype,
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        add(f"w{l}", np.ascontiguousarray(w, dtype="<f8").tobytes(), w.shape, "<f8")
        add(f"b{l}", np.ascontiguousarray(b, dtype="<f8").tobytes(), b.shape, "<f8")
    if model.weight_masks is not None:
        for l, m in enumerate(model.weight_masks):
            add(f"mask{l}", _mask_bytes(m), m.shape, "packbits")
    for name, sc in scalers.items():
        add(f"scaler.{name}.min",
            np.ascontiguousarray(sc.x_min, dtype="<f8").tobytes(),
            sc.x_min.shape, "<f8")
        add(f"scaler.{name}.max",
            np.ascontiguousarray(sc.x_max, dtype="<f8").tobytes(),
            sc.x_max.shape, "<f8")

    payload = b"".join(chunks)
    header = {
        "dims": list(model.dims()),
        "activations": list(model.activations),
        "has_masks": model.weight_masks is not None,
        "scalers": sorted(scalers.keys()),
        "layout": dict(zip(TARGET_FIELDS, TargetLayout().indices())),
        "meta": meta,
        "arrays": directory,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(f"{MAGIC} {FORMAT_VERSION}\n".encode())
            fh.write(f"{len(header_bytes)}\n".encode())
            fh.write(header_bytes)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> tuple[Mlp, dict[str, MinMaxScaler], dict]:
    """Read a model container; validates version, checksum, and dimensions."""
    path = Path(path)
    if not path.exists():
        raise ModelIoError(f"model file not found: {path}")
    with open(path, "rb") as fh:
        magic_line = fh.readline().decode(errors="replace").strip()
        parts = magic_line.split()
        if len(parts) != 2 or parts[0] != MAGIC:
            raise ModelIoError(f"{path}: not a model container")
        try:
            version = int(parts[1])
        except ValueError:
            raise ModelIoError(f"{path}: bad version field") from None
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"{path}: unsupported format version {version}")
        try:
            header_len = int(fh.readline().decode().strip())
        except ValueError:
            raise ModelIoError(f"{path}: bad header length") from None
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise ModelIoError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes)
        except json.JSONDecodeError as exc:
            raise ModelIoError(f"{path}: corrupt header: {exc}") from None
        for key in ("dims", "activations", "has_masks", "scalers", "meta",
                    "arrays", "payload_nbytes", "payload_sha256"):
            if key not in header:
                raise ModelIoError(f"{path}: header missing {key!r}")
        payload = fh.read(header["payload_nbytes"])
    if len(payload) != header["payload_nbytes"]:
        raise ModelIoError(f"{path}: truncated payload")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if entry["dtype"] == "packbits":
            arrays[entry["name"]] = _mask_from_bytes(raw, entry["shape"])
        else:
            arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]) \
                .reshape(entry["shape"]).copy()

    dims = header["dims"]
    n_layers = len(dims) - 1
    try:
        weights = [arrays[f"w{l}"] for l in range(n_layers)]
        biases = [arrays[f"b{l}"] for l in range(n_layers)]
        masks = ([arrays[f"mask{l}"] for l in range(n_layers)]
                 if header["has_masks"] else None)
    except KeyError as exc:
        raise ModelIoError(f"{path}: missing array {exc}") from None
    for l, w in enumerate(weights):
        if list(w.shape) != [dims[l], dims[l + 1]]:
            raise ModelIoError(f"{path}: weight {l} shape inconsistent with dims")
    try:
        model = Mlp(weights, biases, header["activations"], masks)
    except ValueError as exc:
        raise ModelIoError(f"{path}: {exc}") from None
    scalers = {}
    for name in header["scalers"]:
        try:
            scalers[name] = MinMaxScaler(arrays[f"scaler.{name}.min"],
                                         arrays[f"scaler.{name}.max"])
        except KeyError as exc:
            raise ModelIoError(f"{path}: missing scaler array {exc}") from None
    return model, scalers, header["meta"]
