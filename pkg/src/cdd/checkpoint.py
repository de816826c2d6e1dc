"""Binary model checkpoints: "CDDK" magic, u32 header fields, f64 LE payloads.

Layout: magic "CDDK" | version u32 | tensor count u32 | per tensor
(name_len u32, name utf-8, ndim u32, dims u32 each, payload f64 LE) |
config-hash length u32 | config-hash bytes.  Parameters appear in sorted
name order followed by two reserved tensors: meta.arch (layer plan) and
meta.freeze_mask (0/1 flags over the sorted parameter names).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .model import AdaptedModel, Arch, ModelError, adapted_param_shapes

__all__ = [
    "CheckpointError",
    "MAGIC",
    "VERSION",
    "serialize_model",
    "deserialize_model",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"CDDK"
VERSION = 1
_META_ARCH = "meta.arch"
_META_FREEZE = "meta.freeze_mask"


class CheckpointError(RuntimeError):
    pass


def _arch_vector(arch: Arch) -> np.ndarray:
    fixed = [arch.data_dim, arch.cond_dim, arch.n_encoder, arch.time_freqs,
             int(arch.per_layer_gate)]
    return np.array(fixed + list(arch.hidden), dtype=np.float64)


def _arch_from_vector(vec: np.ndarray) -> Arch:
    vals = np.asarray(vec, dtype=np.float64).ravel()
    if vals.size < 6 or not np.all(vals == np.round(vals)):
        raise CheckpointError(f"malformed {_META_ARCH} tensor: {vals.tolist()}")
    ints = [int(v) for v in vals]
    try:
        return Arch(data_dim=ints[0], cond_dim=ints[1], hidden=tuple(ints[5:]),
                    n_encoder=ints[2], time_freqs=ints[3], per_layer_gate=bool(ints[4]))
    except ModelError as e:
        raise CheckpointError(f"checkpoint encodes an invalid architecture: {e}") from e


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def serialize_model(model: AdaptedModel, config_hash: str = "") -> bytes:
    names = sorted(model.params)
    for name in names:
        if not np.all(np.isfinite(model.params[name])):
            raise CheckpointError(f"refusing to save non-finite tensor {name!r}")
        if name.startswith("meta."):
            raise CheckpointError(f"parameter name {name!r} collides with reserved meta.*")
    flags = np.array([1.0 if n in model.freeze_mask else 0.0 for n in names])
    entries = [(n, np.asarray(model.params[n], dtype=np.float64)) for n in names]
    entries.append((_META_ARCH, _arch_vector(model.arch)))
    entries.append((_META_FREEZE, flags))
    blob = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    blob += [_pack_tensor(n, a) for n, a in entries]
    raw_hash = config_hash.encode("utf-8")
    blob += [struct.pack("<I", len(raw_hash)), raw_hash]
    return b"".join(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset "
                f"{self.off}, only {len(self.data) - self.off} remain"
            )
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def deserialize_model(data: bytes) -> tuple[AdaptedModel, str]:
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}; expected {VERSION}")
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"tensor {i} name length")
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"tensor {i} name is not valid utf-8") from e
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        ndim = r.u32(f"{name} ndim")
        dims = tuple(r.u32(f"{name} dim {d}") for d in range(ndim))
        n_items = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(8 * n_items, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    hash_len = r.u32("config hash length")
    try:
        config_hash = r.take(hash_len, "config hash").decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError("config hash is not valid utf-8") from e
    if r.off != len(data):
        raise CheckpointError(f"{len(data) - r.off} trailing bytes after offset {r.off}")

    for meta_name in (_META_ARCH, _META_FREEZE):
        if meta_name not in tensors:
            raise CheckpointError(f"checkpoint is missing the reserved {meta_name} tensor")
    arch = _arch_from_vector(tensors.pop(_META_ARCH))
    flags = tensors.pop(_META_FREEZE).ravel()
    params = tensors

    expected = adapted_param_shapes(arch)
    problems = [f"{n}: missing" for n in sorted(set(expected) - set(params))]
    problems += [f"{n}: unexpected" for n in sorted(set(params) - set(expected))]
    problems += [
        f"{n}: shape {params[n].shape} != expected {expected[n]}"
        for n in sorted(set(params) & set(expected))
        if params[n].shape != expected[n]
    ]
    if problems:
        raise CheckpointError("checkpoint does not match its architecture: "
                              + "; ".join(problems))
    names = sorted(params)
    if flags.size != len(names) or not np.all(np.isin(flags, (0.0, 1.0))):
        raise CheckpointError(f"malformed {_META_FREEZE} tensor for {len(names)} parameters")
    mask = frozenset(n for n, f in zip(names, flags) if f == 1.0)
    return AdaptedModel(arch=arch, params=params, freeze_mask=mask), config_hash


def save_checkpoint(model: AdaptedModel, path, config_hash: str = "") -> None:
    blob = serialize_model(model, config_hash)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> tuple[AdaptedModel, str]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return deserialize_model(data)
