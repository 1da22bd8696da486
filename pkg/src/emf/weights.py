"""Binary containers: ``EMFW`` weight files and ``EMFT`` tensor files.

``EMFW``: magic ``b"EMFW"`` | u32 LE manifest length | UTF-8 JSON manifest |
raw little-endian float32 blob. The manifest is an object::

    {"format": "EMFW", "version": 1, "form": "train" | "fused",
     "config": {...ModelConfig...}, "meta": {...},
     "tensors": [{"name", "shape", "dtype": "f32", "offset", "form"}, ...]}

Tensor offsets are byte offsets into the blob; tensors are stored in sorted
name order so the same model always serializes to the same bytes.

``EMFT``: magic ``b"EMFT"`` | u32 LE rank | rank x u32 LE dims | float32 LE data.

All writers go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from emf.errors import FormatError
from emf.model import Model, ModelConfig

WEIGHTS_MAGIC = b"EMFW"
TENSOR_MAGIC = b"EMFT"
VERSION = 1
_U32 = struct.Struct("<I")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def model_to_bytes(model: Model) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "form": model.form})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "EMFW",
        "version": VERSION,
        "form": model.form,
        "config": model.config.to_dict(),
        "meta": model.meta,
        "tensors": tensors,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return WEIGHTS_MAGIC + _U32.pack(len(head)) + head + b"".join(chunks)


def model_from_bytes(data: bytes, source: str = "<bytes>") -> Model:
    if len(data) < 8 or data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{source}: not an EMFW weights file (bad magic at byte offset 0)")
    (mlen,) = _U32.unpack_from(data, 4)
    if 8 + mlen > len(data):
        raise FormatError(f"{source}: manifest length {mlen} runs past end of file at byte offset 4")
    try:
        manifest = json.loads(data[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable manifest at byte offset 8 ({exc})") from None
    try:
        form = manifest["form"]
        cfg = ModelConfig.from_dict(manifest["config"])
        entries = manifest["tensors"]
    except KeyError as exc:
        raise FormatError(f"{source}: manifest is missing key {exc}") from None
    blob = memoryview(data)[8 + mlen:]
    params = {}
    for e in entries:
        if e.get("dtype") != "f32":
            raise FormatError(f"{source}: tensor {e.get('name')!r} has unsupported dtype {e.get('dtype')!r}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = int(e["offset"]), int(e["offset"]) + 4 * n
        if stop > len(blob):
            raise FormatError(f"{source}: tensor {e['name']!r} runs past end of blob (byte offset {8 + mlen + start})")
        params[e["name"]] = np.frombuffer(blob[start:stop], dtype="<f4").astype(np.float32).reshape(e["shape"])
    return Model(cfg, form, params, dict(manifest.get("meta", {})))


def save_model(model: Model, path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> Model:
    path = Path(path)
    return model_from_bytes(path.read_bytes(), str(path))


def read_manifest(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not an EMFW weights file")
    (mlen,) = _U32.unpack_from(data, 4)
    return json.loads(data[8:8 + mlen].decode("utf-8"))


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    dims = b"".join(_U32.pack(d) for d in arr.shape)
    return TENSOR_MAGIC + _U32.pack(arr.ndim) + dims + arr.tobytes()


def tensor_from_bytes(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 8 or data[:4] != TENSOR_MAGIC:
        raise FormatError(f"{source}: not an EMFT tensor file (bad magic at byte offset 0)")
    (rank,) = _U32.unpack_from(data, 4)
    header = 8 + 4 * rank
    if len(data) < header:
        raise FormatError(f"{source}: truncated dims at byte offset 8")
    shape = tuple(_U32.unpack_from(data, 8 + 4 * i)[0] for i in range(rank))
    n = int(np.prod(shape, dtype=np.int64))
    if len(data) != header + 4 * n:
        raise FormatError(f"{source}: expected {header + 4 * n} bytes for shape {shape}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=header).astype(np.float32).reshape(shape)


def save_tensor(arr: np.ndarray, path) -> None:
    atomic_write_bytes(path, tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    return tensor_from_bytes(path.read_bytes(), str(path))
