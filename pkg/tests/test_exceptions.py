"""
Tests for the headswap.exceptions module.
"""

import pytest
from unittest import TestCase

from headswap.exceptions import (
    HeadSwapError, InvalidArgumentError, ConfigurationError, ProviderError,
    UnavailableProviderError, InpaintProviderError, NumericFailureError,
    CheckpointError, StageError, EmptyRegionSignal
)


class TestHeadSwapError(TestCase):
    """Test cases for HeadSwapError base exception class."""

    def test_basic_instantiation(self):
        """Test basic instantiation of HeadSwapError."""
        error = HeadSwapError("Test error message")

        assert str(error) == "Test error message"
        assert error.message == "Test error message"
        assert error.error_type == "unknown"
        assert error.context == {}
        assert error.exit_code == 1

    def test_instantiation_with_context(self):
        """Test instantiation with additional context information."""
        context = {"stage": "blend", "resolution": 64}
        error = HeadSwapError("Test error", "custom_type", context)

        assert error.error_type == "custom_type"
        assert error.context == context

    def test_exception_inheritance(self):
        """Test that HeadSwapError inherits from Exception."""
        assert isinstance(HeadSwapError("Test"), Exception)

    def test_context_is_mutable(self):
        """Test that context dictionary is mutable."""
        error = HeadSwapError("Test")
        error.context["new_key"] = "new_value"
        assert error.context["new_key"] == "new_value"


class TestSubclasses(TestCase):
    """Test cases for the specialised error classes."""

    def test_invalid_argument(self):
        """Test InvalidArgumentError carries the argument name and exit code 2."""
        error = InvalidArgumentError("bad radius", "radius")
        assert error.argument == "radius"
        assert error.error_type == "invalid_argument"
        assert error.exit_code == 2

    def test_configuration(self):
        """Test ConfigurationError carries the config key."""
        error = ConfigurationError("bad value", "train.lr_g")
        assert error.config_key == "train.lr_g"
        assert error.exit_code == 2

    def test_provider_errors_share_exit_code(self):
        """Test provider failures all exit with code 3."""
        for error in (
            ProviderError("failed", "vgg"),
            UnavailableProviderError("none", "segmentation"),
            InpaintProviderError("timeout", "http"),
        ):
            assert isinstance(error, ProviderError)
            assert error.exit_code == 3

        assert UnavailableProviderError("none").error_type == "unavailable_provider"
        assert InpaintProviderError("x").error_type == "inpaint_provider"

    def test_numeric_failure(self):
        """Test NumericFailureError names the layer and checkpoint."""
        error = NumericFailureError("nan", layer="adain3", checkpoint="run/aligner_000010.ckpt")
        assert error.layer == "adain3"
        assert error.checkpoint == "run/aligner_000010.ckpt"
        assert error.exit_code == 4

    def test_checkpoint(self):
        """Test CheckpointError records the path."""
        error = CheckpointError("corrupt", "x.ckpt")
        assert error.path == "x.ckpt"
        assert error.error_type == "checkpoint"

    def test_empty_region_signal(self):
        """Test EmptyRegionSignal records the region."""
        assert EmptyRegionSignal("empty", "hair").region == "hair"


class TestStageError(TestCase):
    """Test cases for StageError exit code propagation."""

    def test_exit_code_follows_cause(self):
        """Test StageError takes the exit code of the error it wraps."""
        try:
            try:
                raise InpaintProviderError("timeout", "http")
            except InpaintProviderError as e:
                raise StageError("Stage 'background' failed: timeout", "background") from e
        except StageError as error:
            assert error.stage == "background"
            assert error.exit_code == 3

    def test_exit_code_without_cause(self):
        """Test StageError defaults to exit code 1."""
        assert StageError("boom", "blend").exit_code == 1

    def test_raise_and_catch(self):
        """Test StageError can be caught as HeadSwapError."""
        with pytest.raises(HeadSwapError):
            raise StageError("boom", "blend")
