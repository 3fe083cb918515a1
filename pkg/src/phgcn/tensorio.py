"""PHT1 tensor files, checkpoints and cohort directories.

PHT1 layout (all little-endian)::

    magic   4 bytes  b"PHT1"
    dtype   u8       0 = float32, 1 = uint8, 2 = float64
    rank    u8
    reserved u16     must be 0
    dims    rank x u32
    payload row-major, last index fastest
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PHT1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1, np.dtype("float64"): 2}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    code = CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32, float64 or uint8")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBH", code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic, not a PHT1 file")
    code, rank, reserved = struct.unpack_from("<BBH", buf, 4)
    if code not in DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    if reserved != 0:
        raise FormatError(f"{source}: reserved header field must be 0, got {reserved}")
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dtype = DTYPES[code]
    expected = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(buf) - end != expected:
        raise FormatError(f"{source}: payload is {len(buf) - end} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dtype, offset=end).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), str(path))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: missing") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(directory, params: dict, state: dict, config: dict, history=None) -> None:
    """Write a directory of PHT1 tensors plus ``params.json`` and a config echo."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for kind, tensors in (("param", params), ("buffer", state)):
        for name in sorted(tensors):
            arr = _to_numpy(tensors[name])
            fname = f"{name}.pht"
            write_tensor(directory / fname, arr)
            entries[name] = {"file": fname, "kind": kind, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    write_json(directory / "params.json", entries)
    write_json(directory / "config.json", config)
    if history is not None:
        lines = ["epoch,mean_loss"] + [f"{i + 1},{loss:.10g}" for i, loss in enumerate(history)]
        (directory / "history.csv").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    """Returns (params, state, config) with tensors as numpy arrays."""
    directory = Path(directory)
    entries = read_json(directory / "params.json")
    params, state = {}, {}
    for name, entry in entries.items():
        arr = read_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise FormatError(f"{directory}: tensor {name} shape {arr.shape} != manifest {entry['shape']}")
        (params if entry["kind"] == "param" else state)[name] = arr
    return params, state, read_json(directory / "config.json")


def _to_numpy(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.asarray(t)
