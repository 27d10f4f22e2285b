"""
Tests for the headswap.imagecore module.
"""

import tempfile
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch
from unittest import TestCase

from headswap.exceptions import InvalidArgumentError
from headswap.imagecore import (
    Image, Mask, CropSpec, apply_mask, crop, default_dilation_radius, dilate, feather,
    load_image, load_mask, mask_intersection, mask_invert, mask_sub, mask_union,
    quantize, resize, save_image, save_mask, to_gray
)


def _square_mask(size=16, top=4, left=4, side=6):
    data = np.zeros((size, size))
    data[top:top + side, left:left + side] = 1.0
    return Mask(data)


class TestImage(TestCase):
    """Test cases for the Image value type."""

    def test_rejects_bad_shape(self):
        """Test images must be (H, W, 3)."""
        with pytest.raises(InvalidArgumentError):
            Image(np.zeros((16, 16)))

    def test_rejects_tiny_images(self):
        """Test the minimum image size."""
        with pytest.raises(InvalidArgumentError):
            Image(np.zeros((4, 16, 3)))

    def test_rejects_out_of_range(self):
        """Test values outside [0, 1] are rejected."""
        with pytest.raises(InvalidArgumentError):
            Image(np.full((8, 8, 3), 1.5))
        with pytest.raises(InvalidArgumentError):
            Image(np.full((8, 8, 3), np.nan))

    def test_data_is_read_only_copy(self):
        """Test the stored raster is an immutable copy."""
        raw = np.full((8, 8, 3), 0.5)
        img = Image(raw)
        raw[0, 0, 0] = 0.0
        assert img.data[0, 0, 0] == 0.5
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 1.0

    def test_tensor_conversion(self):
        """Test conversion to and from (1, 3, H, W) tensors."""
        rng = np.random.default_rng(0)
        img = Image(rng.random((8, 12, 3)))
        tensor = img.to_tensor(torch.float64)
        assert tensor.shape == (1, 3, 8, 12)
        assert Image.from_tensor(tensor).allclose(img)

    def test_tensor_is_independent_copy(self):
        """Test tensors from frozen arrays are writable copies and raise no warning."""
        img = Image.constant(4, 4, 0.5)
        mask = Mask.ones(4, 4)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            tensor = img.to_tensor(torch.float64)
            mask_tensor = mask.to_tensor(torch.float64)
        tensor.add_(0.25)
        mask_tensor.zero_()
        assert float(img.data.max()) == 0.5
        assert float(mask.data.min()) == 1.0


class TestMask(TestCase):
    """Test cases for the Mask value type."""

    def test_hard_and_soft(self):
        """Test soft detection."""
        assert _square_mask().is_hard
        assert Mask(np.full((8, 8), 0.5)).soft

    def test_area_and_empty(self):
        """Test area and emptiness."""
        m = _square_mask()
        assert m.area == 36.0
        assert not m.is_empty()
        assert Mask.zeros(8, 8).is_empty()

    def test_set_operations(self):
        """Test union, intersection, difference and inversion."""
        a = _square_mask(left=2)
        b = _square_mask(left=5)
        assert mask_union(a, b).area == 6 * 9
        assert mask_intersection(a, b).area == 6 * 3
        assert mask_sub(a, b).area == 6 * 3
        assert mask_invert(a).area == 16 * 16 - 36
        assert mask_intersection(a, b).subset_of(a)

    def test_shape_mismatch(self):
        """Test operations on mismatched masks raise."""
        with pytest.raises(InvalidArgumentError):
            mask_union(Mask.zeros(8, 8), Mask.zeros(8, 9))


class TestPixelOps(TestCase):
    """Test cases for the deterministic pixel operations."""

    def test_to_gray_uses_bt601(self):
        """Test luma weights."""
        img = Image.constant(8, 8, (1.0, 0.0, 0.0))
        assert np.allclose(to_gray(img).data, 0.299)
        pure_blue = to_gray(Image.constant(8, 8, (0.0, 0.0, 1.0)))
        assert np.allclose(pure_blue.data, 0.114)

    def test_to_gray_idempotent(self):
        """Test graying a gray image changes nothing."""
        rng = np.random.default_rng(1)
        gray = to_gray(Image(rng.random((8, 8, 3))))
        assert np.array_equal(to_gray(gray).data, gray.data)

    def test_dilate_is_chebyshev(self):
        """Test dilation grows a square by the radius on every side."""
        m = _square_mask()
        grown = dilate(m, 2)
        assert grown.area == 10 * 10
        assert m.subset_of(grown)
        assert dilate(m, 0).equals(m)

    def test_dilate_rejects_soft_and_negative(self):
        """Test dilation preconditions."""
        with pytest.raises(InvalidArgumentError):
            dilate(_square_mask(), -1)
        with pytest.raises(InvalidArgumentError):
            dilate(Mask(np.full((8, 8), 0.5)), 1)

    def test_feather(self):
        """Test feathering keeps values in [0, 1] and softens the edge."""
        soft = feather(_square_mask(), 1.0)
        assert soft.soft
        assert soft.data.min() >= 0.0 and soft.data.max() <= 1.0
        assert feather(_square_mask(), 0.0).equals(_square_mask())

    def test_apply_mask(self):
        """Test masking zeroes the outside."""
        out = apply_mask(Image.constant(16, 16, 0.8), _square_mask())
        assert out.data[0, 0, 0] == 0.0
        assert out.data[5, 5, 0] == 0.8

    def test_crop_clamps_to_image(self):
        """Test crop windows stay inside the image."""
        spec = CropSpec(center=(1.0, 1.0), size=8)
        assert spec.window(16, 16) == (0, 0, 8, 8)
        img = Image(np.random.default_rng(2).random((16, 16, 3)))
        assert crop(img, spec).shape == (8, 8)

    def test_central_crop(self):
        """Test central crops use the fraction of the short side."""
        spec = CropSpec.central(64, 64, 0.5)
        assert spec.size == 32
        assert spec.window(64, 64) == (16, 16, 32, 32)

    def test_resize(self):
        """Test bilinear resize keeps constants constant."""
        out = resize(Image.constant(16, 16, 0.25), 32, 24)
        assert out.shape == (32, 24)
        assert np.allclose(out.data, 0.25)
        with pytest.raises(InvalidArgumentError):
            resize(Image.constant(16, 16, 0.25), 4, 4)

    def test_default_dilation_radius(self):
        """Test the default radius is 5% of the short side, rounded up."""
        assert default_dilation_radius(64, 64) == 4
        assert default_dilation_radius(256, 512) == 13


class TestPngHelpers(TestCase):
    """Test cases for PNG input and output."""

    def test_image_round_trip_on_grid(self):
        """Test quantized images survive a PNG round trip exactly."""
        data = quantize(np.random.default_rng(3).random((8, 8, 3)))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "img.png"
            save_image(Image(data), path)
            assert np.array_equal(load_image(path).data, data)

    def test_mask_round_trip(self):
        """Test hard masks survive a PNG round trip."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "mask.png"
            save_mask(_square_mask(), path)
            assert load_mask(path).equals(_square_mask())

    def test_unreadable_file(self):
        """Test a missing or non-PNG file raises InvalidArgumentError."""
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(InvalidArgumentError):
                load_image(Path(tmp) / "missing.png")
            bogus = Path(tmp) / "bogus.png"
            bogus.write_bytes(b"not an image")
            with pytest.raises(InvalidArgumentError):
                load_mask(bogus)
