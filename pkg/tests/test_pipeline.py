"""
Tests for the headswap.pipeline module.
"""

import tempfile
from pathlib import Path

import numpy as np
import pytest
from unittest import TestCase
from unittest.mock import Mock

from headswap.checkpoint import Checkpoint, stage_config_hash
from headswap.config import load_config
from headswap.exceptions import CheckpointError, InvalidArgumentError, StageError
from headswap.imagecore import Image, Mask
from headswap.inpainting import InpaintClient
from headswap.pipeline import (
    STAGES, SwapModels, coarse_segmap, evaluate, evaluation_cases, stage, swap, swap_safe
)
from headswap.segmentation import RegistrySegmenter, SegClass
from headswap.synthetic import gen_synthetic, render_reenacted

SMALL = {
    "aligner": {"width_multiplier": 0.125, "disc_base_channels": 8, "disc_scales": 1},
    "blender": {"base_channels": 8, "levels": 3, "disc_base_channels": 8, "disc_scales": 1},
    "refcreate": {"base_channels": 8, "feature_dim": 16},
}

OPERANDS = {"head_reference", "inpaint_reference", "head_mask", "background", "inpaint_mask", "gray_head"}


def _passthrough_client():
    client = Mock(spec=InpaintClient)
    client.inpaint.side_effect = lambda image, mask: image
    return client


class TestStage(TestCase):
    """Test cases for the stage context manager."""

    def test_wraps_errors(self):
        """Test errors gain the stage name and keep their cause."""
        with pytest.raises(StageError) as exc_info:
            with stage("blend"):
                raise ValueError("boom")
        assert exc_info.value.stage == "blend"
        assert isinstance(exc_info.value.__cause__, ValueError)
        assert exc_info.value.exit_code == 1

    def test_exit_code_follows_cause(self):
        """Test a wrapped HeadSwapError keeps its exit code."""
        with pytest.raises(StageError) as exc_info:
            with stage("preprocess"):
                raise InvalidArgumentError("bad", "x")
        assert exc_info.value.exit_code == 2
        assert "bad" in exc_info.value.message

    def test_stage_order(self):
        """Test the stage list order."""
        assert STAGES[0] == "reenact"
        assert STAGES[-1] == "postprocess"
        assert STAGES.index("reference") < STAGES.index("blend")


class TestCoarseSegmap(TestCase):
    """Test cases for coarse_segmap."""

    def test_labels(self):
        """Test masked pixels become face and others background."""
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:5, 3:6] = True
        seg = coarse_segmap(Mask.from_bool(mask))
        assert np.array_equal(seg.labels == SegClass.SKIN, mask)
        assert set(np.unique(seg.labels).tolist()) == {SegClass.BACKGROUND, SegClass.SKIN}


class TestSwap(TestCase):
    """Test cases for swap and swap_safe with untrained models."""

    @classmethod
    def setUpClass(cls):
        """Build small models and a registered dataset."""
        cls.config = load_config(env={}, overrides=SMALL)
        cls.models = SwapModels.untrained(cls.config)
        cls.data = gen_synthetic(2, resolution=64, seed=5)
        cls.segmenter = RegistrySegmenter()
        cls.data.register(cls.segmenter)
        cls.source, cls.target = cls.data[0].source, cls.data[1].target
        cls.oracle = render_reenacted(cls.source.spec, cls.target.spec)

    def _swap(self, **kwargs):
        kwargs.setdefault("client", _passthrough_client())
        kwargs.setdefault("segmenter", self.segmenter)
        return swap(
            self.source.image,
            self.target.image,
            self.models,
            config=self.config,
            reenacted_segmap=self.oracle.segmap,
            **kwargs,
        )

    def test_artifacts(self):
        """Test the output carries every intermediate product."""
        output = self._swap()
        assert output.image.shape == (64, 64)
        assert set(output.operands) == OPERANDS
        for name in ("reenacted_raw", "soft_mask", "extrapolated_background", "reenacted", "masks", "blended"):
            assert name in output.artifacts, name
        assert output.artifacts["segmap_reenacted"].equals(self.oracle.segmap)
        assert output.artifacts["segmap_target"].equals(self.target.segmap)
        assert output.provenance["face"] in ("matched", "copied") or output.provenance["face"].startswith("fallback:")
        assert isinstance(output.operands["head_mask"], Mask)
        assert isinstance(output.operands["head_reference"], Image)
        assert output.image.data.min() >= 0.0 and output.image.data.max() <= 1.0

    def test_background_kept_outside_enlarged_head(self):
        """Test pixels outside the enlarged head come from the target."""
        output = self._swap()
        outside = ~output.artifacts["masks"].dilated_A.to_bool()
        assert outside.any()
        diff = np.abs(output.image.data - self.target.image.data)[outside]
        assert diff.max() < 1e-5

    def test_postprocess_disabled(self):
        """Test the post-processing inpainter is not called by default."""
        post = _passthrough_client()
        output = self._swap(postprocess_client=post)
        post.inpaint.assert_not_called()
        assert "postprocess_mask" not in output.artifacts
        assert np.array_equal(output.image.data, output.artifacts["blended"].data)

    def test_postprocess_enabled(self):
        """Test enabling post-processing records its mask."""
        output = self._swap(options={"postprocess": True}, postprocess_client=_passthrough_client())
        assert "postprocess_mask" in output.artifacts

    def test_given_soft_mask(self):
        """Test a supplied soft mask replaces the aligner mask."""
        output = self._swap(soft_mask=self.oracle.soft_mask)
        assert output.artifacts["soft_mask"].equals(self.oracle.soft_mask)

    def test_unregistered_target(self):
        """Test a parser miss fails in the segment stage."""
        with pytest.raises(StageError) as exc_info:
            self._swap(segmenter=RegistrySegmenter())
        assert exc_info.value.stage == "segment"
        assert exc_info.value.exit_code == 3

    def test_default_segmenter(self):
        """Test a swap without a segmenter parses the target from the fixture registry."""
        output = swap(
            self.source.image,
            self.target.image,
            self.models,
            config=self.config,
            client=_passthrough_client(),
            reenacted_segmap=self.oracle.segmap,
        )
        assert output.artifacts["segmap_target"].equals(self.target.segmap)
        assert output.image.shape == (64, 64)

    def test_wrong_source_size(self):
        """Test a wrongly sized source fails in the reenact stage."""
        small = Image(np.full((32, 32, 3), 0.5))
        with pytest.raises(StageError) as exc_info:
            swap(small, self.target.image, self.models, config=self.config, client=_passthrough_client())
        assert exc_info.value.stage == "reenact"

    def test_swap_safe(self):
        """Test swap_safe reports success and failure without raising."""
        ok = swap_safe(
            self.source.image,
            self.target.image,
            self.models,
            config=self.config,
            segmenter=self.segmenter,
            reenacted_segmap=self.oracle.segmap,
            client=_passthrough_client(),
        )
        assert ok["success"] is True
        assert "image" in ok["artifacts"]

        failed = swap_safe(
            self.source.image,
            self.target.image,
            self.models,
            config=self.config,
            segmenter=RegistrySegmenter(),
            client=_passthrough_client(),
        )
        assert failed["success"] is False
        assert failed["stage"] == "segment"
        assert failed["error_type"] == "unavailable_provider"


class TestSwapModels(TestCase):
    """Test cases for SwapModels.from_checkpoints."""

    def setUp(self):
        """Set up test fixtures."""
        self.config = load_config(env={}, overrides=SMALL)
        self.models = SwapModels.untrained(self.config)
        self.tmp = tempfile.TemporaryDirectory()
        root = Path(self.tmp.name)
        self.aligner_path = Checkpoint.capture(
            "aligner", self.models.aligner, 0, stage_config_hash(self.config, "aligner")
        ).save(root / "aligner.ckpt")
        self.blender_path = Checkpoint.capture(
            "blender", self.models.blender, 0, stage_config_hash(self.config, "blender")
        ).save(root / "blender.ckpt")

    def tearDown(self):
        """Clean up test fixtures."""
        self.tmp.cleanup()

    def test_load(self):
        """Test both models load from files."""
        models = SwapModels.from_checkpoints(self.config, self.aligner_path, self.blender_path)
        for a, b in zip(models.blender.parameters(), self.models.blender.parameters()):
            assert bool((a == b).all())

    def test_swapped_paths(self):
        """Test passing the checkpoints in the wrong order raises."""
        with pytest.raises(CheckpointError):
            SwapModels.from_checkpoints(self.config, self.blender_path, self.aligner_path)

    def test_hash_mismatch(self):
        """Test a changed aligner section is caught unless forced."""
        other = load_config(env={}, overrides={**SMALL, "aligner": {**SMALL["aligner"], "freeze_identity": True}})
        with pytest.raises(CheckpointError):
            SwapModels.from_checkpoints(other, self.aligner_path, self.blender_path)
        SwapModels.from_checkpoints(other, self.aligner_path, self.blender_path, force=True)


class TestEvaluation(TestCase):
    """Test cases for evaluation."""

    def test_cases(self):
        """Test self cases come first and cross cases pair neighbours."""
        data = gen_synthetic(3, resolution=64, seed=1)
        cases = evaluation_cases(data)
        assert [c.split for c in cases] == ["self"] * 3 + ["cross"] * 3
        assert cases[3].target is data[1].target
        limited = evaluation_cases(data, max_pairs=2)
        assert [c.split for c in limited] == ["self", "self", "cross", "cross"]

    @pytest.mark.slow
    def test_evaluate(self):
        """Test a small evaluation run fills one row per case."""
        config = load_config(env={}, overrides={**SMALL, "eval": {"workers": 1}})
        data = gen_synthetic(2, resolution=64, seed=4)
        report = evaluate(SwapModels.untrained(config), data, config=config, client=_passthrough_client())
        assert len(report.rows) == 4
        self_row = report.rows[0]
        assert self_row.split == "self"
        assert self_row.values["PSNR"] is not None
        assert "PSNR_head" in self_row.values
        assert "PSNR_head" not in report.rows[2].values
        assert set(report.distribution) == {"self", "cross"}
