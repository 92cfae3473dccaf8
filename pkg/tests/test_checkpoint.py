import numpy as np
import pytest

from gridloop import checkpoint as ck
from gridloop import model as md
from test_model import TINY


def test_round_trip_preserves_everything(tmp_path):
    params = md.init_params(TINY, seed=50)
    for _, t in params.named():
        t.data[...] = np.random.default_rng(1).normal(size=t.shape)
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(path, params, TINY)
    loaded, config = ck.load_checkpoint(path)
    assert config == TINY
    for (name_a, a), (name_b, b) in zip(params.named(), loaded.named()):
        assert name_a == name_b
        assert np.array_equal(a.data.astype(np.float32), b.data)


def test_save_is_byte_deterministic(tmp_path):
    params = md.init_params(TINY, seed=51)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ck.save_checkpoint(p1, params, TINY)
    ck.save_checkpoint(p2, params, TINY)
    assert p1.read_bytes() == p2.read_bytes()


def test_loader_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTAMODL" + b"\x00" * 64)
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(path)


def test_loader_rejects_truncation(tmp_path):
    params = md.init_params(TINY, seed=52)
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(path, params, TINY)
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(path.read_bytes()[:-17])
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(clipped)


def test_loader_rejects_trailing_bytes(tmp_path):
    params = md.init_params(TINY, seed=53)
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(path, params, TINY)
    padded = tmp_path / "padded.ckpt"
    padded.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(padded)


def test_loader_rejects_tampered_block_name(tmp_path):
    params = md.init_params(TINY, seed=54)
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(path, params, TINY)
    blob = bytearray(path.read_bytes())
    idx = blob.find(b"slot_embedding")
    blob[idx:idx + 4] = b"slop"
    tampered = tmp_path / "tampered.ckpt"
    tampered.write_bytes(bytes(blob))
    with pytest.raises(ck.CheckpointError) as err:
        ck.load_checkpoint(tampered)
    assert "slot_embedding" in str(err.value)


def test_loader_rejects_invalid_embedded_config(tmp_path):
    params = md.init_params(TINY, seed=55)
    path = tmp_path / "model.ckpt"
    ck.save_checkpoint(path, params, TINY)
    blob = path.read_bytes()
    # corrupt the config JSON region
    broken = blob[:16] + b"{" * (len(ck.MAGIC)) + blob[16 + len(ck.MAGIC):]
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(broken)
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(bad)
