"""
Tests for the headswap.cli module.
"""

import json
import logging
import tempfile
from pathlib import Path

import numpy as np
import pytest
import yaml
from unittest import TestCase

from headswap.checkpoint import Checkpoint, stage_config_hash
from headswap.cli import build_parser, flag_overrides, main, resolve_config, save_artifacts
from headswap.config import load_config
from headswap.imagecore import Image, Mask
from headswap.pipeline import SwapModels
from headswap.segmentation import SegMap
from headswap.synthetic import SyntheticDataset

SMALL = {
    "aligner": {"width_multiplier": 0.125, "disc_base_channels": 8, "disc_scales": 1},
    "blender": {"base_channels": 8, "levels": 3, "disc_base_channels": 8, "disc_scales": 1},
    "refcreate": {"base_channels": 8, "feature_dim": 16},
}


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class _CliTestCase(TestCase):
    """Removes the handlers main() installs."""

    def tearDown(self):
        """Remove handlers added by the test."""
        logger = logging.getLogger("headswap")
        for handler in list(logger.handlers):
            if isinstance(handler, logging.FileHandler):
                handler.close()
            logger.removeHandler(handler)
        logger.setLevel(logging.NOTSET)


class TestParser(_CliTestCase):
    """Test cases for argument parsing and config resolution."""

    def test_command_required(self):
        """Test a missing command exits with a usage error."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_flag_overrides(self):
        """Test only given flags become config overrides."""
        args = build_parser().parse_args(["gen-data", "--out", "d", "--n-pairs", "3", "--seed", "9"])
        assert flag_overrides(args) == {"data": {"n_pairs": 3, "seed": 9}}

    def test_flags_win_over_set(self):
        """Test command flags override --set assignments."""
        args = build_parser().parse_args(
            ["--set", "data.seed=1", "--set", "train.lr_g=2e-4", "gen-data", "--out", "d", "--seed", "9"]
        )
        config = resolve_config(args)
        assert config.data.seed == 9
        assert config.train.lr_g == pytest.approx(2e-4)

    def test_postprocess_flag(self):
        """Test --postprocess maps onto swap.postprocess."""
        args = build_parser().parse_args(
            ["swap", "--source", "s", "--target", "t", "--target-seg", "ts", "--aligner", "a",
             "--blender", "b", "--out", "o", "--postprocess"]
        )
        assert flag_overrides(args) == {"swap": {"postprocess": True}}

    def test_config_file(self):
        """Test a YAML file feeds the configuration."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.yaml"
            path.write_text("train:\n  iterations: 12\n", encoding="utf-8")
            args = build_parser().parse_args(["--config", str(path), "gen-data", "--out", "d"])
            assert resolve_config(args).train.iterations == 12


class TestMain(_CliTestCase):
    """Test cases for main()."""

    def test_gen_data(self):
        """Test gen-data writes a loadable dataset and the taxonomy."""
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "data"
            code = main(["--log-level", "off", "gen-data", "--out", str(out), "--n-pairs", "2", "--workers", "1"])
            assert code == 0
            assert len(SyntheticDataset.load(out)) == 2
            taxonomy = json.loads((out / "taxonomy.json").read_text(encoding="utf-8"))
            assert len(taxonomy["classes"]) == 20

    def test_invalid_config_key(self):
        """Test an unknown --set key exits with code 2."""
        assert main(["--log-level", "off", "--set", "train.iterationz=3", "gen-data", "--out", "d"]) == 2

    def test_missing_dataset(self):
        """Test training on a missing dataset exits with code 2."""
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["--log-level", "off", "train-aligner", "--data", str(Path(tmp) / "none")])
        assert code == 2

    def test_missing_checkpoint(self):
        """Test swapping with a missing checkpoint exits with code 2."""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            code = main([
                "--log-level", "off", "swap",
                "--source", str(root / "s.png"), "--target", str(root / "t.png"),
                "--target-seg", str(root / "ts.png"), "--aligner", str(root / "a.ckpt"),
                "--blender", str(root / "b.ckpt"), "--out", str(root / "out.png"),
            ])
        assert code == 2


@pytest.mark.slow
class TestDeterminism(_CliTestCase):
    """Test cases for repeated seeded command runs."""

    def test_gen_data_and_evaluate_twice(self):
        """Test two seeded gen-data plus evaluate runs give identical datasets and metrics."""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            config_path = root / "config.yaml"
            config_path.write_text(yaml.safe_dump(SMALL), encoding="utf-8")
            config = load_config(config_path, env={})
            models = SwapModels.untrained(config)
            aligner = Checkpoint.capture(
                "aligner", models.aligner, 0, stage_config_hash(config, "aligner")
            ).save(root / "aligner.ckpt")
            blender = Checkpoint.capture(
                "blender", models.blender, 0, stage_config_hash(config, "blender")
            ).save(root / "blender.ckpt")

            for run in ("first", "second"):
                base = ["--log-level", "off", "--config", str(config_path)]
                data = root / run / "data"
                assert main(base + ["gen-data", "--out", str(data), "--n-pairs", "2", "--seed", "13"]) == 0
                assert main(base + [
                    "evaluate", "--data", str(data), "--aligner", str(aligner),
                    "--blender", str(blender), "--out", str(root / run / "eval"),
                ]) == 0

            assert _tree_bytes(root / "first" / "data") == _tree_bytes(root / "second" / "data")
            first = (root / "first" / "eval" / "metrics.csv").read_bytes()
            second = (root / "second" / "eval" / "metrics.csv").read_bytes()
        assert first == second
        assert first.count(b"\n") == 5


class TestSaveArtifacts(TestCase):
    """Test cases for save_artifacts."""

    def test_writes_files(self):
        """Test images, masks, segmaps, operands and provenance are written."""
        image = Image(np.full((8, 8, 3), 0.25))
        mask = Mask(np.eye(8))
        artifacts = {
            "blended": image,
            "soft_mask": mask,
            "segmap_target": SegMap(np.zeros((8, 8), dtype=np.uint8)),
            "operands": {"head_reference": image, "head_mask": mask},
            "provenance": {"face": "matched", "beard": "fallback:hair"},
        }
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp) / "artifacts"
            save_artifacts(artifacts, root)
            names = sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())
            provenance = json.loads((root / "provenance.json").read_text(encoding="utf-8"))
        assert names == [
            "blended.png",
            "operands/head_mask.png",
            "operands/head_reference.png",
            "provenance.json",
            "segmap_target.png",
            "soft_mask.png",
        ]
        assert provenance["beard"] == "fallback:hair"
