"""NFT binary tensor container.

Single tensor record (all integers little-endian)::

    b"NFLT"  u32 version(=1)  u32 dtype  u32 rank  u64 dims[rank]  payload

``dtype`` is 1 for float32 and 2 for int64; the payload is row-major. A
bundle of named tensors (checkpoints, latent dumps) is::

    b"NFLB"  u32 version(=1)  u32 count
    count x ( u32 name_len  utf-8 name  <tensor record> )
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO, Dict, Mapping

import numpy as np

MAGIC = b"NFLT"
BUNDLE_MAGIC = b"NFLB"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<i8")}
DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("int64"): 2}


class NFTFormatError(ValueError):
    """Raised on a corrupt or unsupported NFT stream."""


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x)
    if arr.dtype.kind == "f":
        arr = arr.astype(np.float32)
    elif arr.dtype.kind in "iub":
        arr = arr.astype(np.int64)
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return np.array(arr, order="C", copy=True)  # ascontiguousarray would promote 0-d to 1-d


def write_tensor(fh: BinaryIO, x) -> None:
    arr = _as_numpy(x)
    fh.write(MAGIC)
    fh.write(struct.pack("<III", VERSION, DTYPE_CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(DTYPES[DTYPE_CODES[arr.dtype]]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise NFTFormatError("truncated NFT stream")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise NFTFormatError("bad magic, not an NFT tensor record")
    version, code, rank = struct.unpack("<III", _read_exact(fh, 12))
    if version != VERSION:
        raise NFTFormatError(f"unsupported NFT version {version}")
    if code not in DTYPES:
        raise NFTFormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dt = DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
    return data.reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path, x) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_bundle(path, tensors: Mapping[str, object]) -> None:
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, x in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, x)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_bundle(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != BUNDLE_MAGIC:
            raise NFTFormatError("bad magic, not an NFT bundle")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise NFTFormatError(f"unsupported NFT version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, n).decode("utf-8")
            out[name] = read_tensor(fh)
        if fh.read(1):
            raise NFTFormatError("trailing bytes after bundle")
        return out


def save_module(path, module) -> None:
    """Writes a torch module's state dict as an NFT bundle."""
    save_bundle(path, {k: v for k, v in module.state_dict().items()})


def load_module(path, module):
    import torch

    state = {k: torch.from_numpy(np.array(v)) for k, v in load_bundle(path).items()}
    module.load_state_dict(state)
    return module
