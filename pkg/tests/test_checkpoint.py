"""Tests for the binary checkpoint format."""

import struct

import numpy as np
import pytest

from src.checkpoint import FORMAT_VERSION
from src.checkpoint import MAGIC
from src.checkpoint import CheckpointError
from src.checkpoint import load_checkpoint
from src.checkpoint import read_checkpoint
from src.checkpoint import save_checkpoint
from src.dataset import load_dataset
from src.hyper import Hyper
from src.model import build
from src.tensor import Tensor
from src.train import train


def _header_length(payload: bytes) -> int:
    (text_len,) = struct.unpack_from("<I", payload, len(MAGIC) + 4)
    return len(MAGIC) + 8 + text_len + 64


@pytest.fixture
def trained_like_model(small_model, rng):
    """The small model with perturbed weights and moved batch-norm statistics."""
    for p in small_model.parameters():
        p.data = p.data + rng.normal(scale=0.01, size=p.shape).astype(p.data.dtype)
    small_model(Tensor(rng.uniform(size=(2, 3, 64, 64)).astype(np.float32)))
    return small_model


def test_save_then_load_reproduces_state_config_and_outputs(tmp_path, trained_like_model, rng):
    path = save_checkpoint(trained_like_model, tmp_path / "runs" / "model.ckpt")

    loaded = load_checkpoint(path)

    assert loaded.config == trained_like_model.config
    assert not loaded.training
    original = trained_like_model.state_dict()
    for name, array in loaded.state_dict().items():
        np.testing.assert_array_equal(array, original[name], err_msg=name)
    images = Tensor(rng.uniform(size=(1, 3, 64, 64)).astype(np.float32))
    for a, b in zip(trained_like_model.eval()(images), loaded(images)):
        np.testing.assert_array_equal(a.data, b.data)
    assert not (tmp_path / "runs" / "model.ckpt.tmp").exists()


def test_read_checkpoint_returns_config_text_and_every_array(tmp_path, small_model):
    path = save_checkpoint(small_model, tmp_path / "model.ckpt")

    config_text, state = read_checkpoint(path)

    assert config_text == small_model.config.to_text()
    assert list(state) == list(small_model.state_dict())
    assert all(array.dtype == np.float32 for array in state.values())


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError, match="no such checkpoint"):
        load_checkpoint(tmp_path / "absent.ckpt")


@pytest.mark.parametrize("keep", [0, 5, 20, 200, -1])
def test_truncated_file_is_a_checkpoint_error(tmp_path, small_model, keep):
    path = save_checkpoint(small_model, tmp_path / "model.ckpt")
    payload = path.read_bytes()
    path.write_bytes(payload[:keep])

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_magic_version_and_trailing_bytes_are_rejected(tmp_path, small_model):
    path = save_checkpoint(small_model, tmp_path / "model.ckpt")
    payload = path.read_bytes()

    path.write_bytes(b"NOTAMODL" + payload[len(MAGIC) :])
    with pytest.raises(CheckpointError, match="bad magic"):
        read_checkpoint(path)

    path.write_bytes(MAGIC + struct.pack("<I", FORMAT_VERSION + 1) + payload[len(MAGIC) + 4 :])
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)

    path.write_bytes(payload + b"\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_edited_config_text_fails_the_hash_check(tmp_path, small_model):
    path = save_checkpoint(small_model, tmp_path / "model.ckpt")
    payload = path.read_bytes()
    assert b"fsa_k = 7" in payload

    path.write_bytes(payload.replace(b"fsa_k = 7", b"fsa_k = 5"))

    with pytest.raises(CheckpointError, match="config hash mismatch"):
        load_checkpoint(path)


def test_state_that_does_not_fit_the_stored_config_is_rejected(tmp_path, small_config):
    three_classes = save_checkpoint(build(small_config), tmp_path / "nc3.ckpt").read_bytes()
    one_class = save_checkpoint(build(small_config.with_overrides(num_classes=1)), tmp_path / "nc1.ckpt")
    payload = one_class.read_bytes()
    header = _header_length(payload)
    assert header == _header_length(three_classes)

    one_class.write_bytes(payload[:header] + three_classes[header:])

    with pytest.raises(CheckpointError, match="head"):
        load_checkpoint(one_class)


def test_fixed_seed_training_gives_bitwise_identical_checkpoints(tmp_path, small_config, synthetic_dir):
    dataset = load_dataset(synthetic_dir)
    hyper = Hyper(epochs=2, batch_size=2, eval_every=0, seed=5)
    payloads = []
    for run in ("first", "second"):
        model = build(small_config, seed=5)
        train(model, dataset, hyper)
        payloads.append(save_checkpoint(model, tmp_path / f"{run}.ckpt").read_bytes())

    assert payloads[0] == payloads[1]
