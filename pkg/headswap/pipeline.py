"""
End-to-end head swap and evaluation.

swap() runs the stages in order:

    reenact -> refine_hair -> segment -> preprocess -> reference -> background -> blend
    -> postprocess

Any failure is re-raised as StageError naming the stage, with the original error chained.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .aligner import Aligner, reenact
from .blender import (
    BlenderModel,
    BlendInputs,
    MaskBundle,
    background_reference,
    blend,
    excess_hair_mask,
    extrapolate_background,
    postprocess,
    preprocess,
    refine_hair,
)
from .checkpoint import Checkpoint, stage_config_hash
from .config import HeadSwapConfig
from .exceptions import HeadSwapError, StageError, UnavailableProviderError
from .imagecore import Image, Mask, apply_mask
from .inpainting import InpaintClient, InpaintClientFactory
from .keypoints import KeypointSet
from .logs import configure_logging
from .metrics import (
    MetricReport,
    MetricRow,
    akd,
    distribution_metric,
    embedding_metric,
    ms_ssim,
    perceptual_distance,
    psnr,
    ssim,
)
from .providers import ProviderSet
from .refcreate import build_head_reference, extract_features
from .segmentation import RegistrySegmenter, SegClass, SegMap, SegmentationProvider, head_mask, segment
from .synthetic import SyntheticDataset, SyntheticSample, render_reenacted
from .types import Provenance, SwapOptions, SwapResult

logger = logging.getLogger(__name__)

STAGES = ("reenact", "refine_hair", "segment", "preprocess", "reference", "background", "blend", "postprocess")


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Attach the stage name to any error raised inside the block."""
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        message = e.message if isinstance(e, HeadSwapError) else str(e)
        raise StageError(f"Stage '{name}' failed: {message}", name) from e


@dataclass
class SwapModels:
    """Trained parameters of both stages."""

    aligner: Aligner
    blender: BlenderModel

    @classmethod
    def from_checkpoints(
        cls,
        config: HeadSwapConfig,
        aligner: Union[str, Path, Checkpoint],
        blender: Union[str, Path, Checkpoint],
        force: bool = False,
    ) -> "SwapModels":
        """
        Build both models from checkpoints, verifying the config hashes.

        Raises:
            CheckpointError: On a missing or corrupt file, wrong stage, or hash mismatch
        """
        models = cls(Aligner(config.aligner), BlenderModel(config.blender, config.refcreate))
        for stage_name, source, model in (("aligner", aligner, models.aligner), ("blender", blender, models.blender)):
            expected = stage_config_hash(config, stage_name)
            if isinstance(source, Checkpoint):
                checkpoint = source
            else:
                checkpoint = Checkpoint.load(source, expected_hash=expected, stage=stage_name, force=force)
            checkpoint.restore(model)
        return models

    @classmethod
    def untrained(cls, config: HeadSwapConfig) -> "SwapModels":
        return cls(Aligner(config.aligner), BlenderModel(config.blender, config.refcreate))


@dataclass
class SwapOutput:
    """Final image plus every intermediate product, for inspection."""

    image: Image
    artifacts: Dict[str, Any] = field(default_factory=dict)

    @property
    def operands(self) -> Dict[str, Any]:
        return self.artifacts["operands"]

    @property
    def provenance(self) -> Provenance:
        return self.artifacts["provenance"]


def coarse_segmap(mask: Mask) -> SegMap:
    """Label every pixel of a head mask as face; used when no parser can serve the image."""
    labels = np.where(mask.to_bool(), int(SegClass.SKIN), int(SegClass.BACKGROUND)).astype(np.uint8)
    return SegMap(labels)


def swap(
    source: Image,
    target: Image,
    models: SwapModels,
    options: Optional[SwapOptions] = None,
    config: Optional[HeadSwapConfig] = None,
    segmenter: Optional[SegmentationProvider] = None,
    client: Optional[InpaintClient] = None,
    postprocess_client: Optional[InpaintClient] = None,
    reenacted_segmap: Optional[SegMap] = None,
    soft_mask: Optional[Mask] = None,
) -> SwapOutput:
    """
    Put the source head onto the target image.

    Args:
        source: Source portrait
        target: Target portrait
        models: Trained aligner and blender
        options: Per-call overrides (postprocess, dilation_radius, tau, include_neck,
            log_level, log_file)
        config: Configuration; defaults to HeadSwapConfig()
        segmenter: Parser for the target (and the reenacted image, unless given)
        client: Inpainter for the background references
        postprocess_client: Inpainter for the optional post-processing; defaults to client
        reenacted_segmap: Known segmentation of the reenacted head
        soft_mask: Known soft head mask of the reenacted head; defaults to the aligner's mask

    Returns:
        SwapOutput with the final image and the artifact bundle

    Raises:
        StageError: Naming the failed stage; the original error is the __cause__
    """
    config = config or HeadSwapConfig()
    options = options or {}
    if options.get("log_level") or options.get("log_file"):
        configure_logging(options.get("log_level"), options.get("log_file"))
    include_neck = options.get("include_neck", config.blender.include_neck)
    radius = options.get("dilation_radius", config.blender.dilation_radius)
    tau = options.get("tau", config.refcreate.tau)
    do_postprocess = options.get("postprocess", config.swap.postprocess)
    client = client or InpaintClientFactory.create_client(config.inpaint.to_options())
    artifacts: Dict[str, Any] = {}

    with stage("reenact"):
        reenacted = reenact(source, target, models.aligner)
        artifacts["reenacted_raw"] = reenacted.image
        M_soft = soft_mask if soft_mask is not None else reenacted.mask
        artifacts["soft_mask"] = M_soft

    with stage("refine_hair"):
        I_ext = extrapolate_background(
            target, reenacted.hard_mask(), client, config.swap.hair_extrapolation_radius
        )
        I_A = refine_hair(reenacted.image, I_ext, M_soft)
        artifacts["extrapolated_background"] = I_ext
        artifacts["reenacted"] = I_A

    with stage("segment"):
        seg_T = segment(target, segmenter)
        if reenacted_segmap is not None:
            seg_A = reenacted_segmap
        else:
            try:
                seg_A = segment(I_A, segmenter)
            except UnavailableProviderError:
                logger.warning("No parser for the reenacted head; using the aligner mask as a single face region")
                seg_A = coarse_segmap(reenacted.hard_mask())
        artifacts["segmap_reenacted"] = seg_A
        artifacts["segmap_target"] = seg_T

    with stage("preprocess"):
        masks: MaskBundle = preprocess(I_A, seg_A, target, seg_T, radius, include_neck)
        artifacts["masks"] = masks

    with stage("reference"):
        pyramid = models.blender.pyramid
        f_A = extract_features(I_A, pyramid)
        f_T = extract_features(target, pyramid)
        res = target.shape
        head_reference, provenance = build_head_reference(
            f_A,
            seg_A,
            f_T,
            seg_T,
            apply_mask(target, masks.head_T),
            tau,
            config.refcreate.fallback,
            source_image=I_A,
            min_donor=config.refcreate.min_donor_for(*res),
        )
        artifacts["provenance"] = provenance

    with stage("background"):
        inpaint_reference = background_reference(target, masks.inpaint_T, client)

    with stage("blend"):
        inputs = BlendInputs(
            head_reference=head_reference,
            inpaint_reference=inpaint_reference,
            head_mask=masks.head_A,
            background=masks.background_T,
            inpaint_mask=masks.inpaint_A,
            gray_head=masks.gray_head_A,
        )
        artifacts["operands"] = inputs.as_dict()
        blended = blend(inputs, models.blender)
        artifacts["blended"] = blended

    with stage("postprocess"):
        final = blended
        if do_postprocess:
            leftover = excess_hair_mask(seg_T, seg_A, include_neck)
            artifacts["postprocess_mask"] = leftover
            final = postprocess(blended, leftover, postprocess_client or client, enabled=True)

    logger.info("Swap finished: %d regions matched of %d", sum(v == "matched" for v in provenance.values()), len(provenance))
    return SwapOutput(image=final, artifacts=artifacts)


def swap_safe(
    source: Image,
    target: Image,
    models: SwapModels,
    options: Optional[SwapOptions] = None,
    **kwargs: Any,
) -> SwapResult:
    """
    swap() without exceptions.

    Returns:
        SwapResult with success, and either the artifacts (plus "image") or error details
    """
    try:
        output = swap(source, target, models, options, **kwargs)
        artifacts = dict(output.artifacts)
        artifacts["image"] = output.image
        return {"success": True, "artifacts": artifacts}
    except StageError as e:
        cause = e.__cause__
        error_type = cause.error_type if isinstance(cause, HeadSwapError) else type(cause).__name__
        return {"success": False, "error": e.message, "error_type": error_type, "stage": e.stage}
    except HeadSwapError as e:
        return {"success": False, "error": e.message, "error_type": e.error_type}


@dataclass
class _EvalCase:
    split: str
    index: int
    source: SyntheticSample
    target: SyntheticSample


def _guarded(errors: List[str], label: str, fn: Callable[[], float]) -> Optional[float]:
    try:
        return fn()
    except HeadSwapError as e:
        errors.append(f"{label}: {e.message}")
        logger.warning("Metric %s failed: %s", label, e.message)
        return None


def _evaluate_case(
    case: _EvalCase,
    models: SwapModels,
    providers: ProviderSet,
    config: HeadSwapConfig,
    segmenter: SegmentationProvider,
    client: InpaintClient,
) -> Tuple[MetricRow, Optional[Image], List[str]]:
    errors: List[str] = []
    label = f"{case.split}/{case.index}"
    oracle = render_reenacted(case.source.spec, case.target.spec)
    values: Dict[str, Optional[float]] = {}
    try:
        output = swap(
            case.source.image,
            case.target.image,
            models,
            config=config,
            segmenter=segmenter,
            client=client,
            reenacted_segmap=oracle.segmap,
        )
    except StageError as e:
        errors.append(f"{label}/swap: {e.message}")
        logger.warning("Swap failed for %s at stage %s", label, e.stage)
        return MetricRow(split=case.split, pair=case.index, values=values), None, errors

    oracle_head = apply_mask(oracle.image, head_mask(oracle.segmap))
    generated = output.artifacts["reenacted_raw"]
    source_head = apply_mask(case.source.image, head_mask(case.source.segmap))

    def keypoint_distance() -> float:
        anchors = oracle.keypoints.to_tensor()
        detected = providers.keypoints.keypoints(generated.to_tensor(), anchors)
        return akd(KeypointSet.from_tensor(detected, oracle.keypoints.names, oracle.keypoints.pairs), oracle.keypoints)

    values["CSIM"] = _guarded(errors, f"{label}/CSIM", lambda: embedding_metric(generated, source_head, providers.identity))
    values["LPIPS"] = _guarded(errors, f"{label}/LPIPS", lambda: perceptual_distance(generated, oracle_head, providers.perceptual))
    values["PSNR"] = _guarded(errors, f"{label}/PSNR", lambda: psnr(generated, oracle_head))
    values["SSIM"] = _guarded(errors, f"{label}/SSIM", lambda: ssim(generated, oracle_head))
    values["MS_SSIM"] = _guarded(errors, f"{label}/MS_SSIM", lambda: ms_ssim(generated, oracle_head))
    values["AKD"] = _guarded(errors, f"{label}/AKD", keypoint_distance)
    if case.split == "self":
        masks: MaskBundle = output.artifacts["masks"]
        final = output.image
        values["PSNR_inpainting"] = _guarded(
            errors, f"{label}/PSNR_inpainting", lambda: psnr(final, case.target.image, masks.inpaint_A)
        )
        values["PSNR_head"] = _guarded(errors, f"{label}/PSNR_head", lambda: psnr(final, case.target.image, masks.head_A))
    return MetricRow(split=case.split, pair=case.index, values=values), output.image, errors


def evaluation_cases(dataset: SyntheticDataset, max_pairs: Optional[int] = None) -> List[_EvalCase]:
    """Self pairs (same identity) followed by cross pairs (neighbouring identities)."""
    pairs = list(dataset)[:max_pairs] if max_pairs else list(dataset)
    cases = [_EvalCase("self", p.index, p.source, p.target) for p in pairs]
    cross = dataset.cross_pairs()[: len(pairs)]
    cases.extend(_EvalCase("cross", i, src, tgt) for i, (src, tgt) in enumerate(cross))
    return cases


def evaluate(
    models: SwapModels,
    dataset: SyntheticDataset,
    providers: Optional[ProviderSet] = None,
    config: Optional[HeadSwapConfig] = None,
    client: Optional[InpaintClient] = None,
    segmenter: Optional[SegmentationProvider] = None,
    progress: bool = False,
) -> MetricReport:
    """
    Swap every evaluation pair and measure the results.

    Reenactment columns compare the aligner output with the fixture's ideal reenactment;
    PSNR_inpainting and PSNR_head compare the final image with the target and are reported
    for the self split only. FID is computed per split between final images and targets.
    Metric failures are recorded in the report and the run continues.
    """
    config = config or HeadSwapConfig()
    providers = providers or ProviderSet.default()
    client = client or InpaintClientFactory.create_client(config.inpaint.to_options())
    if segmenter is None:
        registry = RegistrySegmenter()
        dataset.register(registry)
        segmenter = registry

    cases = evaluation_cases(dataset, config.eval.max_pairs)
    logger.info("Evaluating %d pairs with %d workers", len(cases), config.eval.workers)

    def run(case: _EvalCase) -> Tuple[MetricRow, Optional[Image], List[str]]:
        return _evaluate_case(case, models, providers, config, segmenter, client)  # type: ignore[arg-type]

    with ThreadPoolExecutor(max_workers=config.eval.workers) as pool:
        results = list(tqdm(pool.map(run, cases), total=len(cases), desc="evaluate", disable=not progress))

    report = MetricReport(providers=providers.describe())
    finals: Dict[str, List[Image]] = {}
    references: Dict[str, List[Image]] = {}
    for case, (row, image, errors) in zip(cases, results):
        report.rows.append(row)
        report.errors.extend(errors)
        if image is not None:
            finals.setdefault(case.split, []).append(image)
            references.setdefault(case.split, []).append(case.target.image)
    for split in ("self", "cross"):
        generated: Sequence[Image] = finals.get(split, [])
        report.distribution[split] = _guarded(
            report.errors,
            f"{split}/FID",
            lambda: distribution_metric(generated, references.get(split, []), providers.perceptual),  # noqa: B023
        )
    return report
