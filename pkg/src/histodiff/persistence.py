"""Bit-exact on-disk formats: tensor containers, dataset manifests, checkpoints.

Tensor container layout (all integers little-endian):

    bytes 0..3    magic "NCSD"
    bytes 4..7    format version, uint32 (currently 1)
    byte  8       dtype code, uint8: 0 = float32, 1 = uint8, 2 = int32
    bytes 9..12   rank, uint32
    then          rank * uint32 dims
    then          row-major payload, prod(dims) * itemsize bytes

Files are written to a temporary sibling and renamed into place, so readers
never observe a partially written container or manifest.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Any

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"NCSD"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("u1"): 1,
    np.dtype("<i4"): 2,
}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i4")}


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_tensor(path: str, tensor: np.ndarray) -> None:
    """Serialize ``tensor`` (float32, uint8, or int32) to ``path``."""
    arr = np.asarray(tensor)
    if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr = arr.astype(dt, copy=False)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(
            f"unsupported dtype {arr.dtype}; cast to float32, uint8, or int32 first"
        )
    header = bytearray()
    header += MAGIC
    header += struct.pack("<I", FORMAT_VERSION)
    header += struct.pack("<B", _DTYPE_CODES[arr.dtype])
    header += struct.pack("<I", arr.ndim)
    for d in arr.shape:
        header += struct.pack("<I", d)
    _atomic_write(path, bytes(header) + arr.tobytes())


def read_tensor(path: str) -> np.ndarray:
    """Read a tensor container; raises FormatError naming the bad byte offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0 (got {blob[:4]!r})")
    if len(blob) < 13:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at byte offset 4")
    (code,) = struct.unpack_from("<B", blob, 8)
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code} at byte offset 8")
    (rank,) = struct.unpack_from("<I", blob, 9)
    dims_end = 13 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"{path}: truncated dims at byte offset {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, 13) if rank else ()
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    payload = blob[dims_end:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length {len(payload)} != expected {expected} "
            f"at byte offset {dims_end}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return arr


def write_json(path: str, obj: Any) -> None:
    """Write a manifest-style JSON document atomically with stable key order."""
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n")


def read_json(path: str) -> Any:
    with open(path, "r") as fh:
        return json.load(fh)


def digest_of(obj: Any) -> str:
    """sha256 hex digest of a JSON-serializable object, order-independent."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, optimizer, step: int, path: str, rng_state: dict | None = None) -> None:
    """Write model parameters, optimizer moments, and bookkeeping under ``path``.

    ``path`` is a directory holding one container per tensor plus a
    ``checkpoint.json`` manifest written last; a directory without a valid
    manifest is treated as garbage by ``load_checkpoint``.
    """
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    os.makedirs(os.path.join(path, "opt"), exist_ok=True)
    names = []
    for name, arr in model.named_parameters():
        write_tensor(os.path.join(path, "params", name + ".ncsd"), arr)
        names.append(name)
    opt_state = optimizer.state_tensors() if optimizer is not None else {}
    for key, arr in opt_state.items():
        write_tensor(os.path.join(path, "opt", key + ".ncsd"), arr)
    manifest = {
        "kind": "histodiff-checkpoint",
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "arch": model.config.as_dict(),
        "param_names": names,
        "optimizer": optimizer.hyperparams() if optimizer is not None else None,
        "opt_state_keys": sorted(opt_state.keys()),
        "rng_state": rng_state,
    }
    write_json(os.path.join(path, "checkpoint.json"), manifest)


def load_checkpoint(path: str):
    """Rebuild (model, optimizer, step, rng_state) from a checkpoint directory."""
    from .nn.denoiser import DenoiserConfig, JointDenoiser
    from .nn.optim import Adam

    manifest_path = os.path.join(path, "checkpoint.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"{manifest_path}: checkpoint manifest missing")
    manifest = read_json(manifest_path)
    if manifest.get("kind") != "histodiff-checkpoint":
        raise FormatError(f"{manifest_path}: not a checkpoint manifest")

    config = DenoiserConfig.from_dict(manifest["arch"])
    model = JointDenoiser(config, rng=np.random.default_rng(0))
    own = dict(model.named_parameters())
    saved = set(manifest["param_names"])
    if saved != set(own):
        raise ConfigError(
            f"checkpoint parameters do not match architecture: "
            f"missing={sorted(set(own) - saved)} extra={sorted(saved - set(own))}"
        )
    for name in manifest["param_names"]:
        arr = read_tensor(os.path.join(path, "params", name + ".ncsd"))
        if arr.shape != own[name].shape:
            raise ConfigError(
                f"parameter {name}: shape {arr.shape} != expected {own[name].shape}"
            )
        own[name][...] = arr

    optimizer = None
    hp = manifest.get("optimizer")
    if hp is not None:
        optimizer = Adam(model, **{k: hp[k] for k in ("lr", "beta1", "beta2", "eps")})
        optimizer.step_count = int(hp["step_count"])
        state = {
            key: read_tensor(os.path.join(path, "opt", key + ".ncsd"))
            for key in manifest["opt_state_keys"]
        }
        optimizer.load_state_tensors(state)
    return model, optimizer, int(manifest["step"]), manifest.get("rng_state")


def check_same_arch(saved_arch: dict, expected_arch: dict) -> None:
    """Raise ConfigError listing every differing architecture field."""
    diffs = []
    for key in sorted(set(saved_arch) | set(expected_arch)):
        a, b = saved_arch.get(key), expected_arch.get(key)
        if a != b:
            diffs.append(f"{key}: checkpoint={a!r} config={b!r}")
    if diffs:
        raise ConfigError("architecture mismatch: " + "; ".join(diffs))
