import struct
import zlib

import pytest
import torch

from elf.checkpoint import (
    Checkpoint,
    CheckpointError,
    ChecksumError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)


def sample():
    g = torch.Generator().manual_seed(0)
    return Checkpoint("tts", {"step": 3, "note": "é"}, {
        "model/w": torch.randn(3, 4, generator=g),
        "model/b": torch.randn(4, generator=g),
        "opt/step": torch.tensor(5.0),
        "empty": torch.zeros(0, 2),
    })


def test_roundtrip_bit_exact(tmp_path):
    ck = sample()
    save_checkpoint(tmp_path / "a.elfk", ck)
    back = load_checkpoint(tmp_path / "a.elfk", kind="tts")
    assert back.kind == "tts" and back.meta == ck.meta
    assert list(back.tensors) == list(ck.tensors)
    for k, t in ck.tensors.items():
        assert back.tensors[k].shape == t.shape
        assert back.tensors[k].numpy().tobytes() == t.numpy().tobytes()
    # re-encoding is stable byte for byte
    assert encode_checkpoint(back) == encode_checkpoint(ck)


def test_header_layout():
    data = encode_checkpoint(sample())
    assert data[:4] == b"ELFK" and struct.unpack("<I", data[4:8])[0] == 1
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_every_single_byte_flip_detected():
    data = encode_checkpoint(Checkpoint("sfen", {}, {"x": torch.ones(2)}))
    for i in range(len(data)):
        bad = bytearray(data)
        bad[i] ^= 0x01
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(bad))


def test_truncation_detected():
    data = encode_checkpoint(sample())
    for n in (0, 3, 10, len(data) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:n])
    with pytest.raises(ChecksumError):
        decode_checkpoint(data[:-5] + data[-4:])


def test_kind_checks(tmp_path):
    with pytest.raises(CheckpointError):
        encode_checkpoint(Checkpoint("vocoder", {}, {}))
    save_checkpoint(tmp_path / "a.elfk", sample())
    with pytest.raises(CheckpointError, match="expected 'fts'"):
        load_checkpoint(tmp_path / "a.elfk", kind="fts")


def test_subset():
    ck = sample()
    assert set(ck.subset("model/")) == {"w", "b"}
