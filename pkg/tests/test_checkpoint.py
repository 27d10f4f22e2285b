"""
Tests for the headswap.checkpoint module.
"""

import tempfile
from pathlib import Path

import pytest
import torch
import torch.nn as nn
from unittest import TestCase

from headswap.checkpoint import Checkpoint, stage_config_hash
from headswap.config import load_config
from headswap.exceptions import CheckpointError


def _model(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Linear(4, 3), nn.ReLU(), nn.Linear(3, 2))


def _trained():
    model = _model()
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-2, betas=(0.5, 0.999))
    loss = model(torch.ones(5, 4)).pow(2).sum()
    loss.backward()
    optimizer.step()
    return model, optimizer


class TestCheckpoint(TestCase):
    """Test cases for Checkpoint."""

    def setUp(self):
        """Set up test fixtures."""
        self.model, self.optimizer = _trained()
        self.checkpoint = Checkpoint.capture("aligner", self.model, 7, "abc123", {"g": self.optimizer})

    def test_capture_copies_state(self):
        """Test captured params do not track later updates."""
        before = self.checkpoint.params["0.weight"].clone()
        with torch.no_grad():
            self.model[0].weight.add_(1.0)
        assert torch.equal(self.checkpoint.params["0.weight"], before)

    def test_bytes_are_deterministic(self):
        """Test serializing twice gives the same bytes."""
        assert self.checkpoint.to_bytes() == self.checkpoint.to_bytes()

    def test_from_bytes(self):
        """Test a parsed checkpoint equals the original."""
        parsed = Checkpoint.from_bytes(self.checkpoint.to_bytes())
        assert parsed.equals(self.checkpoint)
        assert parsed.iteration == 7
        assert set(parsed.optimizer_state) == {"g"}

    def test_equals_detects_changes(self):
        """Test equality covers iteration and parameter bits."""
        other = Checkpoint.capture("aligner", self.model, 8, "abc123")
        assert not other.equals(self.checkpoint)
        changed = Checkpoint.capture("aligner", _model(seed=1), 7, "abc123")
        assert not changed.equals(self.checkpoint)

    def test_restore_model_and_optimizer(self):
        """Test restoring reproduces parameters and optimizer moments."""
        parsed = Checkpoint.from_bytes(self.checkpoint.to_bytes())
        model = _model(seed=3)
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-2, betas=(0.5, 0.999))
        parsed.restore(model, {"g": optimizer})
        for a, b in zip(model.parameters(), self.model.parameters()):
            assert torch.equal(a, b)
        restored = optimizer.state_dict()
        original = self.optimizer.state_dict()
        assert restored["param_groups"][0]["betas"] == (0.5, 0.999)
        for key, state in original["state"].items():
            assert torch.equal(restored["state"][key]["exp_avg"], state["exp_avg"])

    def test_restore_wrong_model(self):
        """Test restoring into another architecture raises CheckpointError."""
        with pytest.raises(CheckpointError):
            self.checkpoint.restore(nn.Linear(4, 2))

    def test_corrupt_bytes(self):
        """Test corrupt data raises CheckpointError."""
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(b"not a zip archive")
        data = self.checkpoint.to_bytes()
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(data[: len(data) // 2])


class TestCheckpointFiles(TestCase):
    """Test cases for saving and loading checkpoint files."""

    def setUp(self):
        """Set up test fixtures."""
        self.tmp = tempfile.TemporaryDirectory()
        model, _ = _trained()
        self.path = Checkpoint.capture("blender", model, 3, "hash-a").save(Path(self.tmp.name) / "ckpt" / "b.zip")

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_load(self):
        """Test loading with matching stage and hash."""
        loaded = Checkpoint.load(self.path, expected_hash="hash-a", stage="blender")
        assert loaded.stage == "blender"
        assert loaded.iteration == 3

    def test_hash_mismatch(self):
        """Test a hash mismatch raises unless forced."""
        with pytest.raises(CheckpointError) as exc_info:
            Checkpoint.load(self.path, expected_hash="hash-b")
        assert exc_info.value.exit_code == 2
        assert Checkpoint.load(self.path, expected_hash="hash-b", force=True).config_hash == "hash-a"

    def test_stage_mismatch(self):
        """Test loading with the wrong stage raises."""
        with pytest.raises(CheckpointError):
            Checkpoint.load(self.path, stage="aligner", force=True)

    def test_missing_file(self):
        """Test a missing file raises CheckpointError."""
        with pytest.raises(CheckpointError):
            Checkpoint.load(Path(self.tmp.name) / "missing.zip")


class TestStageConfigHash(TestCase):
    """Test cases for stage_config_hash."""

    def test_aligner_scope(self):
        """Test the aligner hash follows only the aligner section."""
        base = load_config(env={})
        trained = load_config(env={}, overrides={"train": {"iterations": 5}, "refcreate": {"tau": 0.5}})
        wider = load_config(env={}, overrides={"aligner": {"width_multiplier": 0.5}})
        assert stage_config_hash(base, "aligner") == stage_config_hash(trained, "aligner")
        assert stage_config_hash(base, "aligner") != stage_config_hash(wider, "aligner")

    def test_blender_scope(self):
        """Test the blender hash covers the reference-creation section."""
        base = load_config(env={})
        tau = load_config(env={}, overrides={"refcreate": {"tau": 0.5}})
        aligner = load_config(env={}, overrides={"aligner": {"width_multiplier": 0.5}})
        assert stage_config_hash(base, "blender") != stage_config_hash(tau, "blender")
        assert stage_config_hash(base, "blender") == stage_config_hash(aligner, "blender")

    def test_unknown_stage(self):
        """Test an unknown stage raises."""
        with pytest.raises(CheckpointError):
            stage_config_hash(load_config(env={}), "segmenter")
