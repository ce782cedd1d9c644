"""Versioned checkpoint container: a JSON header plus raw little-endian array
bytes. The layout is fully deterministic, so saving, loading and saving again
produces identical bytes; that makes fingerprints meaningful.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .dsp import FeatureStats
from .errors import InvalidInput

MAGIC = b"SEPPIPE\x01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                      # "prestage" or "postfilter"
    config: dict
    params: dict                   # name -> np.ndarray
    stats: FeatureStats | None
    metadata: dict
    fingerprint: str

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def params_from_module(module: torch.nn.Module) -> dict:
    return {name: t.detach().cpu().numpy().copy() for name, t in module.state_dict().items()}


def load_into_module(module: torch.nn.Module, params: dict) -> None:
    state = module.state_dict()
    if set(state) != set(params):
        missing = sorted(set(state) - set(params))
        extra = sorted(set(params) - set(state))
        raise InvalidInput(f"parameter names mismatch: missing {missing}, unexpected {extra}")
    for name, t in state.items():
        arr = params[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise InvalidInput(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {tuple(t.shape)}")
    module.load_state_dict({name: torch.as_tensor(arr) for name, arr in params.items()})


def compute_fingerprint(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind: str, config: dict, params: dict,
                    stats: FeatureStats | None = None, metadata: dict | None = None) -> str:
    """Write the container and return the parameter fingerprint."""
    params = {
        name: np.ascontiguousarray(arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else arr)
        for name, arr in params.items()
    }
    fingerprint = compute_fingerprint(params)
    names = sorted(params)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "stats": None if stats is None else {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        "metadata": metadata or {},
        "fingerprint": fingerprint,
        "params": [
            {"name": n, "dtype": str(params[n].dtype), "shape": list(params[n].shape)}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            arr = params[n]
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return fingerprint


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            magic = f.read(len(MAGIC))
            if magic != MAGIC:
                raise InvalidInput(f"{path}: not a checkpoint file (bad magic)")
            (blob_len,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(blob_len).decode())
            if header.get("format_version") != FORMAT_VERSION:
                raise InvalidInput(
                    f"{path}: unsupported checkpoint version {header.get('format_version')}"
                )
            params = {}
            for entry in header["params"]:
                dtype = np.dtype(entry["dtype"]).newbyteorder("<")
                n_items = int(np.prod(entry["shape"])) if entry["shape"] else 1
                raw = f.read(n_items * dtype.itemsize)
                if len(raw) != n_items * dtype.itemsize:
                    raise InvalidInput(f"{path}: truncated parameter {entry['name']}")
                params[entry["name"]] = (
                    np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).astype(np.dtype(entry["dtype"]))
                )
    except (OSError, struct.error, json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise InvalidInput(f"{path}: corrupt checkpoint ({exc})") from exc
    actual = compute_fingerprint(params)
    if actual != header["fingerprint"]:
        raise InvalidInput(f"{path}: parameter bytes do not match the stored fingerprint")
    stats = None
    if header["stats"] is not None:
        stats = FeatureStats(np.asarray(header["stats"]["mean"]), np.asarray(header["stats"]["std"]))
    return Checkpoint(header["kind"], header["config"], params, stats, header["metadata"], actual)


def check_prestage_fingerprint(post_metadata: dict, prestage_fingerprint: str) -> bool:
    """Warn (and return False) when a post-filter checkpoint was trained
    against a different pre-stage than the one being used."""
    recorded = post_metadata.get("prestage_fingerprint")
    if recorded is not None and recorded != prestage_fingerprint:
        warnings.warn(
            "post-filter checkpoint was trained against a different pre-stage "
            f"(recorded {recorded[:12]}..., loaded {prestage_fingerprint[:12]}...)",
            stacklevel=2,
        )
        return False
    return True
