"""Binary checkpoint container.

Layout (all integers little-endian):

    magic      8 bytes  b"MTCHKPT1"
    meta_len   u32      length of the UTF-8 JSON metadata blob
    meta       bytes    JSON object; carries kind ("model"/"adapter"/"tokens"),
                        config, and format-specific fields
    n_arrays   u32
    per array:
        name_len u16, name utf-8 bytes
        ndim     u8,  dims u32 each
        data     raw float64 little-endian, C order

Arrays are written in the order of the dict passed in, which for models is
the canonical weight_shapes() order. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import DecoderLM, DecoderWeights, ModelConfig
from .tensor import Tensor

MAGIC = b"MTCHKPT1"


def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += MAGIC
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        name_b = name.encode("utf-8")
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.astype("<f8", copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint container (bad magic)")
    off = 8
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        arrays[name] = arr.astype(np.float64).copy()
    if off != len(raw):
        raise ContractError(f"{path}: trailing bytes after last array")
    return meta, arrays


def save_model(path, lm: DecoderLM) -> None:
    meta = {"kind": "model", "format_version": 1, "config": lm.config.to_dict()}
    arrays = {name: t.data for name, t in lm.weights.parameters().items()}
    save_container(path, meta, arrays)


def load_model(path) -> DecoderLM:
    meta, arrays = load_container(path)
    if meta.get("kind") != "model":
        raise ContractError(f"{path}: kind {meta.get('kind')!r}, expected 'model'")
    config = ModelConfig.from_dict(meta["config"])
    params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
    return DecoderLM(config, DecoderWeights(config, params))


def save_adapters(path, adapters: dict) -> None:
    """Adapter file: same container, arrays '<target>.A' / '<target>.B'."""
    if not adapters:
        raise ContractError("no adapters to save")
    targets = sorted(adapters)
    first = adapters[targets[0]]
    meta = {
        "kind": "adapter",
        "format_version": 1,
        "rank": first.rank,
        "alpha": first.alpha,
        "targets": targets,
    }
    arrays: dict[str, np.ndarray] = {}
    for name in targets:
        a = adapters[name]
        arrays[name + ".A"] = a.A.data
        arrays[name + ".B"] = a.B.data
    save_container(path, meta, arrays)


def load_adapters(path) -> dict:
    from .lora import LoraAdapter  # deferred: lora imports model helpers

    meta, arrays = load_container(path)
    if meta.get("kind") != "adapter":
        raise ContractError(f"{path}: kind {meta.get('kind')!r}, expected 'adapter'")
    adapters = {}
    for name in meta["targets"]:
        adapters[name] = LoraAdapter(
            target=name,
            A=Tensor(arrays[name + ".A"], requires_grad=True),
            B=Tensor(arrays[name + ".B"], requires_grad=True),
            rank=int(meta["rank"]),
            alpha=float(meta["alpha"]),
        )
    return adapters


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
