"""Self-describing parameter archive.

Layout::

    b"SGAPARCH"  | uint32 LE header length | UTF-8 JSON header | payload

The header holds ``format_version``, a config snapshot, free-form metadata,
the SHA-256 of the payload and, per array, its name, shape, offset and byte
count. Every payload is little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ArchiveIntegrityError, IncompatibleArchiveError
from .networks import DiscriminatorConfig, GeneratorConfig, ModelParams

MAGIC = b"SGAPARCH"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def write_archive(path, arrays, config=None, meta=None, format_version=FORMAT_VERSION):
    entries = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value, dtype=_DTYPE, order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": int(format_version),
        "config": config or {},
        "meta": meta or {},
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def read_archive(path, expected_version=FORMAT_VERSION):
    """Return ``(arrays, config, meta)``; arrays map name -> float32 ndarray."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ArchiveIntegrityError(f"cannot read archive {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4 or not blob.startswith(MAGIC):
        raise ArchiveIntegrityError(f"{path} is not a parameter archive (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveIntegrityError(f"{path}: corrupt header") from exc
    version = header.get("format_version")
    if version != expected_version:
        raise IncompatibleArchiveError(f"{path}: format_version {version}, this build reads {expected_version}")
    payload = blob[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ArchiveIntegrityError(f"{path}: payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["offset"] + e["nbytes"] > len(payload) or e["nbytes"] != count * _DTYPE.itemsize:
            raise ArchiveIntegrityError(f"{path}: array {e['name']} overruns the payload")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, header.get("config", {}), header.get("meta", {})


def params_arrays(params: ModelParams):
    arrays = {f"generator/{k}": v for k, v in params.generator_weights.items()}
    arrays.update({f"discriminator/{k}": v for k, v in params.discriminator_weights.items()})
    return arrays


def save_params(params: ModelParams, path, meta=None, extra_arrays=None):
    arrays = params_arrays(params)
    if extra_arrays:
        arrays.update(extra_arrays)
    return write_archive(path, arrays, config=params.config_snapshot(), meta=meta,
                         format_version=params.format_version)


def params_from_archive(arrays, config):
    gen_cfg = GeneratorConfig(**config["generator"])
    disc_cfg = DiscriminatorConfig(**config["discriminator"])
    gw = {k[len("generator/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("generator/")}
    dw = {k[len("discriminator/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("discriminator/")}
    params = ModelParams(gw, dw, gen_cfg, disc_cfg, extra_config=config.get("extra", {}))
    # shape check against the configs
    params.build()
    return params


def load_params(path) -> ModelParams:
    arrays, config, _ = read_archive(path)
    try:
        return params_from_archive(arrays, config)
    except (KeyError, TypeError) as exc:
        raise ArchiveIntegrityError(f"{path}: incomplete config snapshot ({exc})") from exc
