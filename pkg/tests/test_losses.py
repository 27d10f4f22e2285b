"""
Tests for the headswap.losses module.
"""

import numpy as np
import pytest
import torch
import torch.nn as nn
from torch.autograd import gradcheck
from unittest import TestCase

from headswap.config import AlignerLossWeights, BlenderLossWeights
from headswap.exceptions import InvalidArgumentError
from headswap.imagecore import Image, Mask
from headswap.keypoints import KeypointSet
from headswap.losses import (
    cosine_distance, cycle_loss, dice_loss, feature_distance, feature_matching_loss,
    gray_reg_loss, hinge_adv_loss, id_losses, keypoint_closure_loss, keypoint_closure_tensor,
    l1_loss, term_values, total_aligner_loss, total_blender_loss
)
from headswap.layers import seeded
from headswap.logs import ALIGNER_TERMS, BLENDER_TERMS
from headswap.providers import ConvFeatureProvider, ModuleIdentityProvider
from headswap.refcreate import RegionCorrelation

GRADCHECK = {"eps": 1e-4, "atol": 1e-4, "rtol": 1e-3}
GRADCHECK_CASES = 50


def _pair_set(gap):
    points = np.array([[0.5, 0.5], [0.5 - gap, 0.5]])
    return KeypointSet(points, ("lower", "upper"), ((0, 1),))


def _cycle_oracle(gamma, index_a, index_t, target, reference, tau):
    target_flat = target.reshape(3, -1).T
    reference_flat = reference.reshape(3, -1).T
    total = 0.0
    for j, t_pixel in enumerate(index_t):
        logits = gamma[:, j] / tau
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        cycled = (weights[:, None] * reference_flat[index_a]).sum(axis=0)
        total += np.abs(cycled - target_flat[t_pixel]).sum()
    return total / (len(index_t) * 3)


class TestKeypointClosure(TestCase):
    """Test cases for the keypoint closure loss."""

    def test_single_pair(self):
        """Test a gap of 0.10 against 0.04 costs 0.06."""
        loss = keypoint_closure_loss(_pair_set(0.10), _pair_set(0.04))
        assert float(loss) == pytest.approx(0.06, abs=1e-12)

    def test_equal_gaps_cost_nothing(self):
        """Test matching openings give zero loss even when points move."""
        gen = _pair_set(0.05).shifted((0.1, 0.2))
        assert float(keypoint_closure_loss(gen, _pair_set(0.05))) == pytest.approx(0.0, abs=1e-12)

    def test_structure_mismatch(self):
        """Test sets with different pairs are rejected."""
        with pytest.raises(InvalidArgumentError):
            keypoint_closure_loss(_pair_set(0.1), KeypointSet(np.zeros((11, 2))))

    def test_gradcheck(self):
        """Test analytic gradients of the closure loss on random pairs."""
        pairs = ((0, 1), (2, 3))
        for case in range(GRADCHECK_CASES):
            rng = np.random.default_rng(case)
            batch = int(rng.integers(1, 4))
            lower = rng.uniform(0.3, 0.7, (batch, 2, 2))
            offsets = rng.uniform(0.02, 0.1, (batch, 2, 2)) * rng.choice([-1.0, 1.0], (batch, 2, 2))
            points = np.stack([lower[:, 0], lower[:, 0] + offsets[:, 0], lower[:, 1], lower[:, 1] + offsets[:, 1]], axis=1)
            gen = torch.from_numpy(points).requires_grad_(True)
            # driving gaps stay well away from the generated ones
            gaps = np.abs(offsets).sum(axis=2) * rng.choice([0.5, 1.6], (batch, 2))
            drv_points = np.stack([lower[:, 0], lower[:, 0], lower[:, 1], lower[:, 1]], axis=1)
            drv_points[:, 1, 1] += gaps[:, 0]
            drv_points[:, 3, 1] += gaps[:, 1]
            drv = torch.from_numpy(drv_points)
            assert gradcheck(lambda g: keypoint_closure_tensor(g, drv, pairs), (gen,), **GRADCHECK), case


class TestDiceLoss(TestCase):
    """Test cases for the Dice loss."""

    def test_half_overlap(self):
        """Test half-overlapping equal masks give 0.5."""
        a = np.zeros((8, 8))
        b = np.zeros((8, 8))
        a[0:4, 0:4] = 1.0
        b[0:4, 2:6] = 1.0
        assert float(dice_loss(Mask(a), Mask(b))) == pytest.approx(0.5, abs=1e-6)

    def test_identical_and_empty(self):
        """Test identical masks and two empty masks cost nothing."""
        m = Mask(np.eye(8))
        assert float(dice_loss(m, m)) == pytest.approx(0.0, abs=1e-6)
        assert float(dice_loss(Mask.zeros(8, 8), Mask.zeros(8, 8))) == pytest.approx(0.0, abs=1e-12)

    def test_shape_mismatch(self):
        """Test mismatched shapes raise."""
        with pytest.raises(InvalidArgumentError):
            dice_loss(Mask.zeros(8, 8), Mask.zeros(8, 9))

    def test_gradcheck(self):
        """Test analytic gradients of the Dice loss on random masks."""
        for case in range(GRADCHECK_CASES):
            rng = np.random.default_rng(100 + case)
            shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
            pred = torch.from_numpy(rng.uniform(0.05, 0.95, shape)).requires_grad_(True)
            gt = torch.from_numpy((rng.random(shape) > 0.5).astype(np.float64))
            assert gradcheck(lambda p: dice_loss(p, gt), (pred,), **GRADCHECK), case


class TestAdversarial(TestCase):
    """Test cases for the hinge and feature matching losses."""

    def test_generator_side(self):
        """Test the generator side is the negated mean fake score."""
        fake = [torch.tensor([1.0, 3.0]), torch.tensor([-1.0])]
        assert float(hinge_adv_loss(None, fake, "G")) == pytest.approx((-2.0 + 1.0) / 2)

    def test_discriminator_side(self):
        """Test confident correct scores cost nothing and wrong ones cost 2 per side."""
        assert float(hinge_adv_loss(torch.ones(4), -torch.ones(4), "D")) == 0.0
        assert float(hinge_adv_loss(-torch.ones(4), torch.ones(4), "D")) == 4.0

    def test_bad_arguments(self):
        """Test argument validation."""
        with pytest.raises(InvalidArgumentError):
            hinge_adv_loss(None, torch.ones(1), "D")
        with pytest.raises(InvalidArgumentError):
            hinge_adv_loss(torch.ones(1), torch.ones(1), "X")

    def test_feature_matching(self):
        """Test feature matching is a mean L1 over layers."""
        real = [torch.zeros(1, 2, 2, 2), torch.zeros(1, 1, 2, 2)]
        fake = [torch.ones(1, 2, 2, 2), torch.full((1, 1, 2, 2), 3.0)]
        assert float(feature_matching_loss(real, fake)) == pytest.approx(2.0)
        with pytest.raises(InvalidArgumentError):
            feature_matching_loss([], [])


class TestReconstruction(TestCase):
    """Test cases for L1, perceptual and identity distances."""

    def test_l1(self):
        """Test L1 is the mean absolute difference."""
        assert float(l1_loss(Image.constant(8, 8, 0.2), Image.constant(8, 8, 0.5))) == pytest.approx(0.3)

    def test_l1_gradcheck(self):
        """Test analytic gradients of L1 away from its kink."""
        for case in range(GRADCHECK_CASES):
            rng = np.random.default_rng(200 + case)
            shape = (1, 3, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
            x = torch.from_numpy(rng.random(shape)).requires_grad_(True)
            offsets = rng.uniform(0.05, 0.15, shape) * rng.choice([-1.0, 1.0], shape)
            y = x.detach() + torch.from_numpy(offsets)
            assert gradcheck(lambda a: l1_loss(a, y), (x,), **GRADCHECK), case

    def test_feature_distance(self):
        """Test identical inputs are at distance zero."""
        provider = ConvFeatureProvider()
        img = Image(np.random.default_rng(0).random((16, 16, 3)))
        assert float(feature_distance(provider, img, img)) == 0.0
        assert float(feature_distance(provider, img, Image.constant(16, 16, 0.5))) > 0.0

    def test_cosine_distance(self):
        """Test cosine distance bounds."""
        e = torch.tensor([[1.0, 2.0, 3.0]])
        assert float(cosine_distance(e, e)) == pytest.approx(0.0, abs=1e-6)
        assert float(cosine_distance(e, -e)) == pytest.approx(2.0, abs=1e-6)

    def test_cosine_gradcheck(self):
        """Test analytic gradients of the cosine distance in both embeddings."""
        for case in range(GRADCHECK_CASES):
            rng = np.random.default_rng(300 + case)
            shape = (int(rng.integers(1, 4)), int(rng.integers(2, 9)))
            e_a = torch.from_numpy(rng.normal(size=shape)).requires_grad_(True)
            e_b = torch.from_numpy(rng.normal(size=shape)).requires_grad_(True)
            assert gradcheck(cosine_distance, (e_a, e_b), **GRADCHECK), case

    def test_id_cosine_gradcheck(self):
        """Test the identity cosine term differentiates through the embedder."""
        with seeded(5):
            module = nn.Sequential(nn.Flatten(), nn.Linear(3 * 4 * 4, 8), nn.Tanh()).to(torch.float64)
        provider = ModuleIdentityProvider(module)
        for case in range(GRADCHECK_CASES):
            rng = np.random.default_rng(400 + case)
            gen = torch.from_numpy(rng.random((1, 3, 4, 4))).requires_grad_(True)
            src = torch.from_numpy(rng.random((1, 3, 4, 4)))
            assert gradcheck(lambda g: id_losses(g, src, provider)[0], (gen,), **GRADCHECK), case


class TestCycleLoss(TestCase):
    """Test cases for the cycle consistency loss."""

    def test_matches_brute_force(self):
        """Test the cycle loss against a brute-force softmax oracle on small regions."""
        rng = np.random.default_rng(3)
        for case in range(50):
            n_a = int(rng.integers(1, 9))
            n_t = int(rng.integers(1, 9))
            index_a = np.sort(rng.choice(16, n_a, replace=False)).astype(np.int64)
            index_t = np.sort(rng.choice(16, n_t, replace=False)).astype(np.int64)
            gamma = rng.uniform(-1.0, 1.0, (n_a, n_t))
            target = rng.random((3, 4, 4))
            reference = rng.random((3, 4, 4))
            tau = float(rng.choice([0.05, 0.5, 1.0]))
            corr = RegionCorrelation("face", torch.from_numpy(gamma), index_a, index_t)
            got = float(cycle_loss([corr], torch.from_numpy(target), torch.from_numpy(reference), tau))
            want = _cycle_oracle(gamma, index_a, index_t, target, reference, tau)
            assert got == pytest.approx(want, abs=1e-6), case

    def test_three_pixel_region(self):
        """Test a hand-built three pixel region at unit temperature."""
        gamma = np.array([[1.0, 0.0, -1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        index = np.array([0, 1, 2], dtype=np.int64)
        target = np.zeros((3, 1, 3))
        reference = np.zeros((3, 1, 3))
        reference[0, 0] = [1.0, 0.0, 0.0]
        corr = RegionCorrelation("lips", torch.from_numpy(gamma), index, index)
        got = float(cycle_loss([corr], torch.from_numpy(target), torch.from_numpy(reference), 1.0))
        assert got == pytest.approx(_cycle_oracle(gamma, index, index, target, reference, 1.0), abs=1e-6)

    def test_no_regions(self):
        """Test the loss is zero without regions."""
        assert float(cycle_loss([], torch.zeros(3, 4, 4), torch.zeros(3, 4, 4), 0.1)) == 0.0

    def test_gradcheck(self):
        """Test analytic gradients of the cycle loss in the reference and correlation."""
        for case in range(GRADCHECK_CASES):
            rng = np.random.default_rng(500 + case)
            n_a = int(rng.integers(1, 9))
            n_t = int(rng.integers(1, 9))
            index_a = np.sort(rng.choice(16, n_a, replace=False)).astype(np.int64)
            index_t = np.sort(rng.choice(16, n_t, replace=False)).astype(np.int64)
            # cycled colors lie in [0.6, 1.1), targets below 0.5
            target = torch.from_numpy(rng.random((3, 4, 4)) * 0.5)
            reference = torch.from_numpy(rng.random((3, 4, 4)) * 0.5 + 0.6).requires_grad_(True)
            gamma = torch.from_numpy(rng.uniform(-1.0, 1.0, (n_a, n_t))).requires_grad_(True)
            tau = float(rng.choice([0.1, 0.5, 1.0]))

            def fn(ref, g):
                return cycle_loss([RegionCorrelation("face", g, index_a, index_t)], target, ref, tau)

            assert gradcheck(fn, (reference, gamma), **GRADCHECK), case


class TestGrayRegLoss(TestCase):
    """Test cases for the grayscale regulariser."""

    def test_zero_for_equal_luma(self):
        """Test color shifts that keep luma cost nothing."""
        a = Image.constant(8, 8, 0.5)
        assert float(gray_reg_loss(a, a, Mask.ones(8, 8))) == 0.0

    def test_masked(self):
        """Test differences outside the mask are ignored."""
        a = Image.constant(8, 8, 0.2)
        b = Image.constant(8, 8, 0.6)
        assert float(gray_reg_loss(a, b, Mask.zeros(8, 8))) == 0.0
        assert float(gray_reg_loss(a, b, Mask.ones(8, 8))) == pytest.approx(0.4)

    def test_gradcheck(self):
        """Test analytic gradients of the regulariser on random soft masks."""
        for case in range(GRADCHECK_CASES):
            rng = np.random.default_rng(600 + case)
            h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            a = torch.from_numpy(rng.random((1, 3, h, w))).requires_grad_(True)
            # a per-pixel gray shift keeps the luma difference away from zero
            ref = a.detach() + torch.from_numpy(rng.uniform(0.1, 0.3, (1, 1, h, w)))
            mask = torch.from_numpy(rng.random((1, 1, h, w)))
            assert gradcheck(lambda x: gray_reg_loss(x, ref, mask), (a,), **GRADCHECK), case


class TestTotals(TestCase):
    """Test cases for the weighted objectives."""

    def test_aligner_all_ones(self):
        """Test all-ones terms sum the default weights."""
        terms = {name: 1.0 for name in ALIGNER_TERMS}
        assert total_aligner_loss(terms) == pytest.approx(72.622, abs=1e-12)
        assert total_aligner_loss(terms, gaze_active=False) == pytest.approx(72.122, abs=1e-12)

    def test_gaze_optional_when_inactive(self):
        """Test gaze may be omitted before it is scheduled in."""
        terms = {name: 1.0 for name in ALIGNER_TERMS if name != "gaze"}
        assert total_aligner_loss(terms, AlignerLossWeights(), gaze_active=False) == pytest.approx(72.122, abs=1e-12)
        with pytest.raises(InvalidArgumentError):
            total_aligner_loss(terms, gaze_active=True)

    def test_blender_all_ones(self):
        """Test both cycle terms share the cycle weight."""
        terms = {name: 1.0 for name in BLENDER_TERMS}
        assert total_blender_loss(terms) == pytest.approx(5.01, abs=1e-12)
        del terms["cycle_prime"]
        assert total_blender_loss(terms, BlenderLossWeights()) == pytest.approx(4.01, abs=1e-12)

    def test_unknown_term(self):
        """Test unknown terms are rejected."""
        terms = {name: 1.0 for name in BLENDER_TERMS}
        terms["style"] = 1.0
        with pytest.raises(InvalidArgumentError):
            total_blender_loss(terms)

    def test_tensor_terms(self):
        """Test totals keep tensors differentiable."""
        x = torch.tensor(2.0, requires_grad=True)
        terms = {name: x for name in BLENDER_TERMS}
        total_blender_loss(terms).backward()
        assert float(x.grad) == pytest.approx(5.01)
        assert term_values({"l1": torch.tensor(0.5)}) == {"l1": 0.5}
