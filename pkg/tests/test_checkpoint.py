#!/usr/bin/env python3
"""
Tests for the binary checkpoint codec.
"""

import json
import shutil
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest

from hcan.checkpoint import MAGIC, read_checkpoint, write_checkpoint
from hcan.dataio import build_corpus
from hcan.errors import CheckpointError, CompatibilityError
from hcan.trainer import TrainConfig, build_model, load_checkpoint, save_checkpoint


class TestCheckpointCodec:
    """write_checkpoint / read_checkpoint."""

    @pytest.fixture
    def temp_dir(self):
        temp_dir = tempfile.mkdtemp()
        yield Path(temp_dir)
        shutil.rmtree(temp_dir)

    @pytest.fixture
    def tensors(self):
        rng = np.random.default_rng(0)
        return {"a": rng.standard_normal((2, 3)).astype(np.float32), "b/c": np.arange(4, dtype=np.float32)}

    def test_round_trip(self, temp_dir, tensors):
        path = write_checkpoint(temp_dir / "x.ckpt", {"note": "hi"}, tensors)
        manifest, loaded = read_checkpoint(path)
        assert manifest["note"] == "hi"
        assert manifest["format_version"] == 1
        assert [t["name"] for t in manifest["tensors"]] == ["a", "b/c"]
        for name, arr in tensors.items():
            assert np.array_equal(loaded[name], arr)
        assert not (temp_dir / "x.ckpt.tmp").exists()

    def test_layout(self, temp_dir, tensors):
        path = write_checkpoint(temp_dir / "x.ckpt", {}, tensors)
        raw = path.read_bytes()
        assert raw[:5] == MAGIC
        (length,) = struct.unpack_from("<Q", raw, 5)
        manifest = json.loads(raw[13:13 + length])
        assert manifest["tensors"][1] == {"name": "b/c", "shape": [4], "offset": 6, "count": 4}
        assert len(raw) == 13 + length + 10 * 4

    def test_bad_magic(self, temp_dir, tensors):
        path = write_checkpoint(temp_dir / "x.ckpt", {}, tensors)
        path.write_bytes(b"HCAN2" + path.read_bytes()[5:])
        with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
            read_checkpoint(path)

    def test_truncated_blob(self, temp_dir, tensors):
        path = write_checkpoint(temp_dir / "x.ckpt", {}, tensors)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(path)

    def test_truncated_manifest(self, temp_dir, tensors):
        path = write_checkpoint(temp_dir / "x.ckpt", {}, tensors)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(path)

    def test_trailing_bytes(self, temp_dir, tensors):
        path = write_checkpoint(temp_dir / "x.ckpt", {}, tensors)
        path.write_bytes(path.read_bytes() + b"\x00" * 4)
        with pytest.raises(CheckpointError, match="length disagreement"):
            read_checkpoint(path)

    def test_inconsistent_tensor_table(self, temp_dir, tensors):
        path = write_checkpoint(temp_dir / "x.ckpt", {}, tensors)
        raw = path.read_bytes()
        (length,) = struct.unpack_from("<Q", raw, 5)
        manifest = json.loads(raw[13:13 + length])
        manifest["tensors"][1]["offset"] = 5
        header = json.dumps(manifest, sort_keys=True).encode("utf-8")
        path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + raw[13 + length:])
        with pytest.raises(CheckpointError, match="length disagreement"):
            read_checkpoint(path)

    def test_missing_file(self, temp_dir):
        with pytest.raises(CheckpointError):
            read_checkpoint(temp_dir / "none.ckpt")


class TestModelCheckpoints:
    """save_checkpoint / load_checkpoint."""

    @pytest.fixture
    def temp_dir(self):
        temp_dir = tempfile.mkdtemp()
        yield Path(temp_dir)
        shutil.rmtree(temp_dir)

    @pytest.fixture
    def config(self):
        return TrainConfig(ece_heads=4, ia_heads=4, ablations=("no_adv",), seed=9)

    def test_weights_and_config_survive(self, temp_dir, config):
        model = build_model(4, 3, config)
        path = save_checkpoint(temp_dir / "m.ckpt", model, config, ["a", "b", "c"])
        loaded = load_checkpoint(path)
        assert loaded.config == config
        assert loaded.feature_dim == 4
        assert loaded.label_set == ("a", "b", "c")
        for name, arr in model.state_arrays().items():
            assert np.array_equal(loaded.model.state_arrays()[name], arr)

    def test_compatibility(self, temp_dir, config):
        path = save_checkpoint(temp_dir / "m.ckpt", build_model(4, 3, config), config, ["a", "b", "c"])
        loaded = load_checkpoint(path)
        loaded.check_compatible(build_corpus(["a", "b", "c"], 4, {}))
        with pytest.raises(CompatibilityError, match="feature_dim"):
            loaded.check_compatible(build_corpus(["a", "b", "c"], 5, {}))
        with pytest.raises(CompatibilityError, match="label set"):
            loaded.check_compatible(build_corpus(["a", "c", "b"], 4, {}))

    def test_invalid_manifest(self, temp_dir):
        path = write_checkpoint(temp_dir / "m.ckpt", {"config": {"learning_rate": 1.0}}, {})
        with pytest.raises(CheckpointError, match="invalid checkpoint manifest"):
            load_checkpoint(path)
