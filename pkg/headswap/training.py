"""
Training loops for both stages.

Each iteration runs a discriminator step followed by a generator step with Adam, clips the
global gradient norm of the stepped parameters, and appends a LossRecord to
<run_dir>/losses.jsonl. Checkpoints are written every `checkpoint_every` iterations and at
the end of the run.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from .aligner import Aligner, sample_stretch, stretch_tensor
from .blender import BlenderModel, augment_inpaint_mask, blend_input_tensor, preprocess
from .checkpoint import Checkpoint, stage_config_hash
from .config import HeadSwapConfig
from .exceptions import InvalidArgumentError, NumericFailureError
from .imagecore import apply_mask, mask_invert, mask_union
from .inpainting import InpaintClient, InpaintClientFactory
from .logs import LossLog, LossRecord
from .losses import (
    cycle_loss,
    dice_loss,
    emotion_loss,
    feature_matching_loss,
    gaze_loss,
    gray_reg_loss,
    hinge_adv_loss,
    id_losses,
    keypoint_closure_tensor,
    reconstruction_losses,
    term_values,
    total_aligner_loss,
    total_blender_loss,
)
from .providers import ProviderSet
from .refcreate import DenseFeatures, RegionCorrelation, build_reference_tensor, color_jitter, hflip
from .segmentation import SegMap, head_mask, region_masks
from .synthetic import SyntheticDataset, SyntheticPair, SyntheticSample

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "losses.jsonl"


def clip_gradients(parameters: Iterable[nn.Parameter], max_norm: float) -> float:
    """Clip the global L2 norm of the gradients in place; returns the norm before clipping."""
    params = [p for p in parameters if p.grad is not None]
    if not params:
        return 0.0
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def global_grad_norm(parameters: Iterable[nn.Parameter]) -> float:
    grads = [p.grad.detach().flatten() for p in parameters if p.grad is not None]
    return float(torch.cat(grads).norm()) if grads else 0.0


def _check_loss(value: torch.Tensor, name: str, checkpoint: Optional[str]) -> None:
    if not bool(torch.isfinite(value).all()):
        raise NumericFailureError(
            f"Loss '{name}' is not finite; last good checkpoint: {checkpoint or 'none'}",
            layer=name,
            checkpoint=checkpoint,
        )


@dataclass
class PairBatch:
    """Stacked tensors of a batch of synthetic pairs."""

    pairs: List[SyntheticPair]
    source: torch.Tensor
    target: torch.Tensor
    source_head: torch.Tensor
    target_head: torch.Tensor
    target_keypoints: torch.Tensor

    def __len__(self) -> int:
        return len(self.pairs)


def _stack_images(samples: Sequence[SyntheticSample], dtype: torch.dtype) -> torch.Tensor:
    return torch.cat([s.image.to_tensor(dtype) for s in samples], dim=0)


def _stack_heads(samples: Sequence[SyntheticSample], dtype: torch.dtype, include_neck: bool = False) -> torch.Tensor:
    return torch.cat([head_mask(s.segmap, include_neck).to_tensor(dtype) for s in samples], dim=0)


def collate(pairs: Sequence[SyntheticPair], dtype: torch.dtype = torch.float32) -> PairBatch:
    sources = [p.source for p in pairs]
    targets = [p.target for p in pairs]
    return PairBatch(
        pairs=list(pairs),
        source=_stack_images(sources, dtype),
        target=_stack_images(targets, dtype),
        source_head=_stack_heads(sources, dtype),
        target_head=_stack_heads(targets, dtype),
        target_keypoints=torch.cat([t.keypoints.to_tensor(dtype) for t in targets], dim=0),
    )


class _Trainer:
    """Shared plumbing: data sampling, optimizers, logging and checkpoints."""

    stage = "abstract"

    def __init__(self, config: HeadSwapConfig, data: SyntheticDataset, model: nn.Module) -> None:
        if len(data) == 0:
            raise InvalidArgumentError("Training needs at least one pair", "data")
        resolution = getattr(config, self.stage).resolution
        if data.resolution != resolution:
            raise InvalidArgumentError(
                f"Dataset resolution {data.resolution} does not match {self.stage}.resolution {resolution}", "data"
            )
        self.config = config
        self.train = config.train
        self.data = data
        self.model = model.to(self.train.device)
        self.generator = torch.Generator().manual_seed(self.train.seed)
        self.rng = np.random.default_rng(self.train.seed)
        betas = (self.train.beta1, self.train.beta2)
        self.opt_g = torch.optim.Adam(self.generator_parameters(), lr=self.train.lr_g, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator_parameters(), lr=self.train.lr_d, betas=betas)
        self.config_hash = stage_config_hash(config, self.stage)
        self.iteration = 0
        self.last_checkpoint: Optional[str] = None

    def generator_parameters(self) -> List[nn.Parameter]:
        raise NotImplementedError

    def discriminator_parameters(self) -> List[nn.Parameter]:
        raise NotImplementedError

    def step(self, batch: PairBatch) -> LossRecord:
        raise NotImplementedError

    @property
    def optimizers(self) -> Dict[str, torch.optim.Optimizer]:
        return {"generator": self.opt_g, "discriminator": self.opt_d}

    def sample_batch(self) -> PairBatch:
        size = self.train.batch_size
        indices = torch.randint(0, len(self.data), (size,), generator=self.generator).tolist()
        return collate([self.data[i] for i in indices])

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.capture(self.stage, self.model, self.iteration, self.config_hash, self.optimizers)

    def resume(self, checkpoint: Checkpoint) -> None:
        checkpoint.restore(self.model, self.optimizers)
        self.iteration = checkpoint.iteration

    def _d_step(self, real: torch.Tensor, fake: torch.Tensor) -> float:
        discriminator = self.model.discriminator  # type: ignore[union-attr]
        self.opt_d.zero_grad(set_to_none=True)
        real_scores, _ = discriminator(real)
        fake_scores, _ = discriminator(fake.detach())
        loss_d = hinge_adv_loss(real_scores, fake_scores, "D")
        _check_loss(loss_d, "discriminator", self.last_checkpoint)
        loss_d.backward()
        clip_gradients(self.discriminator_parameters(), self.train.grad_clip)
        self.opt_d.step()
        return float(loss_d.detach())

    def _g_step(self, total: torch.Tensor) -> float:
        _check_loss(total, "total", self.last_checkpoint)
        total.backward()
        norm = clip_gradients(self.generator_parameters(), self.train.grad_clip)
        self.opt_g.step()
        return norm

    def run(self, run_dir: Optional[Union[str, Path]] = None, progress: bool = False) -> Checkpoint:
        """
        Train until the configured iteration count.

        Returns:
            Checkpoint of the final state; with zero iterations, the initial state

        Raises:
            NumericFailureError: If a loss or activation becomes non-finite; carries the
                path of the last good checkpoint
        """
        directory = Path(run_dir or self.train.run_dir)
        total = self.train.iterations
        if self.iteration >= total:
            return self.checkpoint()
        log = LossLog(directory / LOSS_LOG_NAME)
        logger.info("Training %s for %d iterations (batch %d)", self.stage, total, self.train.batch_size)

        bar = tqdm(range(self.iteration, total), desc=f"train-{self.stage}", disable=not progress)
        for it in bar:
            try:
                record = self.step(self.sample_batch())
            except NumericFailureError as e:
                if e.checkpoint is None:
                    e.checkpoint = self.last_checkpoint
                logger.error("Numeric failure at iteration %d (last good checkpoint: %s)", it, e.checkpoint)
                raise
            self.iteration = it + 1
            if it % self.train.log_every == 0 or self.iteration == total:
                log.write(record)
                bar.set_postfix(total=f"{record.weighted_total:.4f}")
                logger.debug("%s iteration %d: total %.5f", self.stage, it, record.weighted_total)
            if self.iteration % self.train.checkpoint_every == 0 and self.iteration < total:
                path = directory / f"{self.stage}_{self.iteration:06d}.ckpt"
                self.checkpoint().save(path)
                self.last_checkpoint = str(path)

        final = self.checkpoint()
        final.save(directory / f"{self.stage}.ckpt")
        return final


class AlignerTrainer(_Trainer):
    """Self-reenactment training of the Aligner against the target head (T * M_T^H)."""

    stage = "aligner"

    def __init__(
        self,
        config: HeadSwapConfig,
        data: SyntheticDataset,
        providers: Optional[ProviderSet] = None,
        model: Optional[Aligner] = None,
    ) -> None:
        self.providers = providers or ProviderSet.default()
        super().__init__(config, data, model or Aligner(config.aligner))
        self.weights = config.losses.aligner

    @property
    def aligner(self) -> Aligner:
        return self.model  # type: ignore[return-value]

    def generator_parameters(self) -> List[nn.Parameter]:
        return list(self.aligner.generator_parameters())

    def discriminator_parameters(self) -> List[nn.Parameter]:
        return list(self.aligner.discriminator_parameters())

    def gaze_active(self, iteration: Optional[int] = None) -> bool:
        it = self.iteration if iteration is None else iteration
        return it >= int(math.floor(self.train.gaze_start_fraction * self.train.iterations))

    def step(self, batch: PairBatch) -> LossRecord:
        self.model.train()
        device = self.train.device
        source = batch.source.to(device)
        target_head = batch.target_head.to(device)
        real = batch.target.to(device) * target_head
        source_head = batch.source.to(device) * batch.source_head.to(device)
        anchors = batch.target_keypoints.to(device)
        sx, sy = sample_stretch(len(batch), self.config.aligner.stretch_range, self.generator)
        target_aug = stretch_tensor(batch.target.to(device), sx.to(device), sy.to(device))

        with torch.no_grad():
            fake = self.aligner(source, target_aug)
        loss_d = self._d_step(real, fake.image)

        self.opt_g.zero_grad(set_to_none=True)
        out = self.aligner(source, target_aug)
        discriminator = self.aligner.discriminator
        fake_scores, fake_feats = discriminator(out.image)
        with torch.no_grad():
            _, real_feats = discriminator(real)

        gaze_active = self.gaze_active()
        l1, perc_vgg = reconstruction_losses(out.image, real, self.providers.perceptual)
        cos_id, perc_id = id_losses(out.image, source_head, self.providers.identity)
        with torch.no_grad():
            driving_kpts = self.providers.keypoints.keypoints(real, anchors)
        terms: Dict[str, torch.Tensor] = {
            "adv": hinge_adv_loss(None, fake_scores, "G"),
            "fm": feature_matching_loss(real_feats, fake_feats),
            "l1": l1,
            "perc_vgg": perc_vgg,
            "perc_id": perc_id,
            "cos_id": cos_id,
            "dice": dice_loss(out.mask, target_head),
            "emo": emotion_loss(out.image, real, self.providers.emotion, anchors),
            "kpt": keypoint_closure_tensor(self.providers.keypoints.keypoints(out.image, anchors), driving_kpts),
        }
        if gaze_active:
            terms["gaze"] = gaze_loss(out.image, real, self.providers.gaze, anchors)
        total = total_aligner_loss(terms, self.weights, gaze_active)
        assert isinstance(total, torch.Tensor)
        grad_norm = self._g_step(total)

        return LossRecord(
            stage="aligner",
            iteration=self.iteration,
            terms=term_values(terms),
            weighted_total=float(total.detach()),
            gaze_active=gaze_active,
            generator_lr=self.opt_g.param_groups[0]["lr"],
            discriminator_loss=loss_d,
            grad_norm=grad_norm,
        )


@dataclass
class _BlendSample:
    """Operands and loss inputs of one blender training sample."""

    inputs: torch.Tensor
    reference: torch.Tensor
    cycle: torch.Tensor
    cycle_prime: Optional[torch.Tensor]
    reg: torch.Tensor
    provenance: Dict[str, str]


class BlenderTrainer(_Trainer):
    """
    Blender training on single images: the same image serves as reenacted input and as
    target. Reference creation sees a color-jittered copy on the input side and a
    mirrored copy on the target side, so colors must be found through correspondence.
    """

    stage = "blender"

    def __init__(
        self,
        config: HeadSwapConfig,
        data: SyntheticDataset,
        providers: Optional[ProviderSet] = None,
        model: Optional[BlenderModel] = None,
        client: Optional[InpaintClient] = None,
    ) -> None:
        self.providers = providers or ProviderSet.default()
        super().__init__(config, data, model or BlenderModel(config.blender, config.refcreate))
        self.weights = config.losses.blender
        self.client = client or InpaintClientFactory.create_client(config.inpaint.to_options())
        res = config.blender.resolution
        self.min_donor = config.refcreate.min_donor_for(res, res)

    @property
    def blender(self) -> BlenderModel:
        return self.model  # type: ignore[return-value]

    def generator_parameters(self) -> List[nn.Parameter]:
        return self.blender.generator_parameters()

    def discriminator_parameters(self) -> List[nn.Parameter]:
        return self.blender.discriminator_parameters()

    def _reference(
        self,
        features_A: torch.Tensor,
        seg_A: SegMap,
        image_T: torch.Tensor,
        seg_T: SegMap,
        source: torch.Tensor,
    ) -> Tuple[torch.Tensor, List[RegionCorrelation], Dict[str, str], torch.Tensor]:
        """Reference from a target image; returns (reference, correlations, provenance, target head colors)."""
        refcreate = self.config.refcreate
        features_T = self.blender.pyramid(image_T)[0]
        head_T = head_mask(seg_T, self.config.blender.include_neck).to_tensor(image_T.dtype).to(image_T.device)
        colors_T = image_T * head_T
        ref = build_reference_tensor(
            DenseFeatures(features_A),
            region_masks(seg_A),
            DenseFeatures(features_T),
            region_masks(seg_T),
            colors_T,
            refcreate.tau,
            refcreate.fallback,
            self.min_donor,
            source,
        )
        return ref.image, ref.correlations, ref.provenance, colors_T

    def prepare(self, pair: SyntheticPair, image: torch.Tensor, jittered: torch.Tensor) -> _BlendSample:
        """
        Build the operand stack and loss inputs of one training sample.

        Args:
            pair: Pair whose target is the training image and whose source is the second
                target image of the same identity
            image: (1, 3, H, W) training image
            jittered: (1, 3, H, W) color-jittered training image
        """
        cfg = self.config
        sample = pair.target
        seg = sample.segmap
        flip = cfg.refcreate.augment.hflip
        image_T = hflip(image) if flip else image
        seg_T = seg.flip_horizontal() if flip else seg

        features_A = self.blender.pyramid(jittered)[0]
        reference, correlations, provenance, colors_T = self._reference(features_A, seg, image_T, seg_T, image)
        tau = cfg.refcreate.tau
        cycle = cycle_loss(correlations, colors_T, reference, tau)

        cycle_prime: Optional[torch.Tensor] = None
        if self.train.cycle_prime:
            image_T2 = pair.source.image.to_tensor(image.dtype).to(image.device)
            reference2, correlations2, _, colors_T2 = self._reference(
                features_A, seg, image_T2, pair.source.segmap, image
            )
            compare = colors_T if self.train.cycle_prime_compare == "target" else colors_T2
            cycle_prime = cycle_loss(correlations2, compare, reference2, tau)

        masks = preprocess(
            sample.image, seg, sample.image, seg, cfg.blender.dilation_radius, cfg.blender.include_neck
        )
        augmented = augment_inpaint_mask(masks.inpaint_A, cfg.blender.mask_policy, self.rng)
        inpaint_reference = self.client.inpaint(sample.image, mask_union(masks.inpaint_T, augmented))
        background = apply_mask(masks.background_T, mask_invert(augmented))

        dtype = image.dtype
        head = masks.head_A.to_tensor(dtype).to(image.device)
        inputs = blend_input_tensor(
            reference.unsqueeze(0),
            inpaint_reference.to_tensor(dtype).to(image.device),
            head,
            background.to_tensor(dtype).to(image.device),
            augmented.to_tensor(dtype).to(image.device),
            masks.gray_head_A.to_tensor(dtype).to(image.device),
        )
        reg = gray_reg_loss(image, reference.unsqueeze(0), head)
        return _BlendSample(inputs, reference, cycle, cycle_prime, reg, provenance)

    def step(self, batch: PairBatch) -> LossRecord:
        self.model.train()
        device = self.train.device
        images = batch.target.to(device)
        jittered = color_jitter(images, self.config.refcreate.augment, self.generator)

        samples = [
            self.prepare(pair, images[i : i + 1], jittered[i : i + 1]) for i, pair in enumerate(batch.pairs)
        ]
        inputs = torch.cat([s.inputs for s in samples], dim=0)

        out = self.blender(inputs)
        loss_d = self._d_step(images, out)

        self.opt_g.zero_grad(set_to_none=True)
        fake_scores, _ = self.blender.discriminator(out)
        l1, perc_vgg = reconstruction_losses(out, images, self.providers.perceptual)
        terms: Dict[str, torch.Tensor] = {
            "adv": hinge_adv_loss(None, fake_scores, "G"),
            "l1": l1,
            "perc_vgg": perc_vgg,
            "cycle": torch.stack([s.cycle for s in samples]).mean(),
            "reg": torch.stack([s.reg for s in samples]).mean(),
        }
        primes = [s.cycle_prime for s in samples if s.cycle_prime is not None]
        if primes:
            terms["cycle_prime"] = torch.stack(primes).mean()
        total = total_blender_loss(terms, self.weights)
        assert isinstance(total, torch.Tensor)
        grad_norm = self._g_step(total)

        copied = sum(1 for s in samples for source in s.provenance.values() if source != "matched")
        return LossRecord(
            stage="blender",
            iteration=self.iteration,
            terms=term_values(terms),
            weighted_total=float(total.detach()),
            generator_lr=self.opt_g.param_groups[0]["lr"],
            discriminator_loss=loss_d,
            grad_norm=grad_norm,
            extras={"unmatched_regions": float(copied)},
        )


def train_aligner(
    config: HeadSwapConfig,
    data: SyntheticDataset,
    providers: Optional[ProviderSet] = None,
    run_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    progress: bool = False,
) -> Checkpoint:
    """
    Train the reenactment stage.

    Args:
        config: Full configuration; uses the aligner, losses and train sections
        data: Synthetic self-reenactment pairs
        providers: Feature providers for the perceptual, identity and expression losses
        run_dir: Directory for losses.jsonl and checkpoints (defaults to train.run_dir)
        resume: Checkpoint to continue from
        progress: Show a progress bar

    Returns:
        Checkpoint of the trained aligner
    """
    trainer = AlignerTrainer(config, data, providers)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run(run_dir, progress)


def train_blender(
    config: HeadSwapConfig,
    data: SyntheticDataset,
    providers: Optional[ProviderSet] = None,
    run_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    client: Optional[InpaintClient] = None,
    progress: bool = False,
) -> Checkpoint:
    """
    Train the blending stage (feature pyramid and UNet).

    The aligner is not needed: each training image plays both the reenacted and the
    target role.
    """
    trainer = BlenderTrainer(config, data, providers, client=client)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run(run_dir, progress)
