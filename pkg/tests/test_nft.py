import io
import struct

import numpy as np
import pytest
import torch

from nfldm import nft


def hand_parse(buf: bytes):
    """Independent reader for a single tensor record."""
    assert buf[:4] == b"NFLT"
    version, dtype, rank = struct.unpack_from("<III", buf, 4)
    dims = struct.unpack_from(f"<{rank}Q", buf, 16)
    off = 16 + 8 * rank
    kind = {1: "<f4", 2: "<i8"}[dtype]
    n = int(np.prod(dims)) if rank else 1
    return version, dims, np.frombuffer(buf[off:], dtype=kind, count=n).reshape(dims)


def test_header_layout_matches_hand_parser():
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 4) / 7
    fh = io.BytesIO()
    nft.write_tensor(fh, x)
    raw = fh.getvalue()
    version, dims, back = hand_parse(raw)
    assert version == 1 and dims == (2, 3, 4) and np.array_equal(back, x)
    assert raw[4:16] == struct.pack("<III", 1, 1, 3)
    assert len(raw) == 16 + 3 * 8 + 24 * 4


def test_round_trip_dtypes_and_scalars(tmp_path):
    for x in (np.random.default_rng(0).normal(size=(5, 1, 2)).astype(np.float32),
              np.arange(6).reshape(3, 2), np.float32(3.5), torch.randn(4, 4), np.zeros((0, 3), np.float32)):
        nft.save_tensor(tmp_path / "t.nft", x)
        back = nft.load_tensor(tmp_path / "t.nft")
        ref = x.numpy() if torch.is_tensor(x) else np.asarray(x)
        assert back.shape == ref.shape and np.array_equal(back, ref)
    assert nft.load_tensor(tmp_path / "t.nft").dtype == np.float32


def test_corrupt_streams(tmp_path):
    p = tmp_path / "t.nft"
    nft.save_tensor(p, np.ones(4, np.float32))
    raw = bytearray(p.read_bytes())
    bad = bytearray(raw)
    bad[0:4] = b"XXXX"
    p.write_bytes(bytes(bad))
    with pytest.raises(nft.NFTFormatError):
        nft.load_tensor(p)
    bad = bytearray(raw)
    bad[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(bad))
    with pytest.raises(nft.NFTFormatError):
        nft.load_tensor(p)
    p.write_bytes(bytes(raw[:-3]))
    with pytest.raises(nft.NFTFormatError):
        nft.load_tensor(p)


def test_bundle_and_module_round_trip(tmp_path):
    tensors = {"a": np.ones((2, 2), np.float32), "idx": np.arange(3), "ünï": np.zeros(1, np.float32)}
    nft.save_bundle(tmp_path / "b.nft", tensors)
    back = nft.load_bundle(tmp_path / "b.nft")
    assert list(back) == list(tensors) and all(np.array_equal(back[k], tensors[k]) for k in tensors)
    with open(tmp_path / "b.nft", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(nft.NFTFormatError):
        nft.load_bundle(tmp_path / "b.nft")
    m = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.GroupNorm(2, 4))
    nft.save_module(tmp_path / "m.nft", m)
    m2 = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.GroupNorm(2, 4))
    nft.load_module(tmp_path / "m.nft", m2)
    for a, b in zip(m.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)
