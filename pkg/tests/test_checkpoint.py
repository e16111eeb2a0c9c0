"""Tests for the binary checkpoint format."""

from dataclasses import replace
import struct

import numpy as np
import pytest

from lighttbnet.core.checkpoint import (MAGIC, Checkpoint, decode, encode, fold_checkpoint_path, load_checkpoint,
                                        read_checkpoint, save_checkpoint)
from lighttbnet.core.errors import (BadMagicError, CheckpointError, CheckpointStructureError,
                                    TruncatedCheckpointError, VersionMismatchError)
from lighttbnet.core.model import build, state_registry
from lighttbnet.core.tensor import Tensor, no_grad


@pytest.fixture
def checkpoint(tiny_config):
    model = build(tiny_config)
    # move the running statistics away from their initial values
    model(Tensor(np.random.default_rng(0).normal(size=(4, 1, 32, 32))))
    return Checkpoint.from_model(model, fold_id=2, epoch=7, val_auc=0.91, seed=11,
                                 preprocess={"image_size": 32})


class TestRoundTrip:
    """Saving and restoring models."""

    def test_bitwise_identical_tensors(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "fold2.ltbn")
        loaded = read_checkpoint(path)
        assert [n for n, _ in loaded.tensors] == [n for n, _ in checkpoint.tensors]
        for (_, a), (_, b) in zip(loaded.tensors, checkpoint.tensors):
            assert a.dtype == b.dtype
            assert a.tobytes() == b.tobytes()

    def test_metadata_survives(self, checkpoint):
        loaded = decode(encode(checkpoint))
        assert loaded.model_config == checkpoint.model_config
        assert (loaded.fold_id, loaded.epoch, loaded.val_auc, loaded.seed) == (2, 7, 0.91, 11)
        assert loaded.preprocess == {"image_size": 32}

    def test_loaded_model_predicts_identically(self, checkpoint, tmp_path, rng):
        path = save_checkpoint(checkpoint, tmp_path / "m.ltbn")
        model, _ = load_checkpoint(path)
        assert not model.training
        original = checkpoint.to_model()
        x = Tensor(rng.normal(size=(3, 1, 32, 32)))
        with no_grad():
            np.testing.assert_array_equal(model.tb_scores(x), original.tb_scores(x))

    def test_float64_round_trip(self, tiny_config, float64):
        model = build(tiny_config)
        restored = decode(encode(Checkpoint.from_model(model))).to_model()
        for (_, a), (_, b) in zip(state_registry(model), state_registry(restored)):
            assert b.dtype == np.float64
            np.testing.assert_array_equal(a, b)

    def test_snapshot_is_a_copy(self, tiny_config):
        model = build(tiny_config)
        snap = Checkpoint.from_model(model)
        model.fc2.bias.data[...] = 42.0
        assert not (snap.state()["fc2.bias"] == 42.0).any()

    def test_fold_path(self, tmp_path):
        assert fold_checkpoint_path(tmp_path, 3) == tmp_path / "fold3.ltbn"


class TestCorruption:
    """Every malformed file fails with a typed error."""

    def test_bad_magic(self, checkpoint):
        data = b"XXXX" + encode(checkpoint)[4:]
        with pytest.raises(BadMagicError):
            decode(data)

    def test_empty_file(self):
        with pytest.raises(BadMagicError):
            decode(b"")

    def test_version_mismatch(self, checkpoint):
        data = bytearray(encode(checkpoint))
        data[4:6] = struct.pack("<H", 99)
        with pytest.raises(VersionMismatchError):
            decode(bytes(data))

    @pytest.mark.parametrize("keep", [6, 9, 40, -1])
    def test_truncated(self, checkpoint, keep):
        data = encode(checkpoint)
        with pytest.raises(TruncatedCheckpointError):
            decode(data[:keep])

    def test_missing_tensor(self, checkpoint):
        broken = Checkpoint(checkpoint.model_config, checkpoint.tensors[:-1])
        with pytest.raises(CheckpointStructureError):
            decode(encode(broken)).to_model()

    def test_wrong_shape(self, checkpoint):
        tensors = list(checkpoint.tensors)
        name, array = tensors[-1]
        tensors[-1] = (name, np.zeros(array.size + 1, dtype=array.dtype))
        with pytest.raises(CheckpointStructureError):
            decode(encode(Checkpoint(checkpoint.model_config, tensors))).to_model()

    def test_out_of_range_model_config(self, checkpoint):
        config = replace(checkpoint.model_config, n_blocks=9, channel_plan=(2,) * 9)
        with pytest.raises(CheckpointStructureError):
            decode(encode(Checkpoint(config, checkpoint.tensors)))

    def test_bad_metadata(self):
        meta = b"{not json"
        data = MAGIC + struct.pack("<HI", 1, len(meta)) + meta + struct.pack("<I", 0)
        with pytest.raises(CheckpointStructureError):
            decode(data)

    def test_errors_share_a_base(self):
        for cls in (BadMagicError, VersionMismatchError, TruncatedCheckpointError, CheckpointStructureError):
            assert issubclass(cls, CheckpointError)
