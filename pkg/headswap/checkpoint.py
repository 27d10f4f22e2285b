"""
Checkpoints: model parameters, optimizer state and the iteration they were taken at.

A checkpoint file is a zip archive with uncompressed entries and fixed timestamps, so
saving the same state twice produces the same bytes:

    manifest.json            stage, iteration, config hash, format version, entry names
    params/00000.npy ...     state_dict tensors in state_dict order
    optimizers/<name>.json   optimizer state_dict with tensors replaced by entry references
    optimizers/<name>/*.npy  optimizer tensors
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ValidationError

from .config import HeadSwapConfig, config_hash
from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
Stage = Literal["aligner", "blender"]

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_TENSOR_KEY = "__tensor__"


class CheckpointManifest(BaseModel):
    format_version: int
    stage: Stage
    iteration: int
    config_hash: str
    params: List[str]
    optimizers: List[str]


def stage_config_hash(config: HeadSwapConfig, stage: str) -> str:
    """Hash of the config sections that shape a stage's parameters."""
    if stage == "aligner":
        return config_hash(config.aligner)
    if stage == "blender":
        return config_hash({"blender": config.blender, "refcreate": config.refcreate})
    raise CheckpointError(f"Unknown checkpoint stage '{stage}'")


def _npy_bytes(tensor: torch.Tensor) -> bytes:
    buffer = io.BytesIO()
    np.save(buffer, tensor.detach().to("cpu").numpy(), allow_pickle=False)
    return buffer.getvalue()


def _npy_tensor(data: bytes) -> torch.Tensor:
    return torch.from_numpy(np.load(io.BytesIO(data), allow_pickle=False).copy())


def _encode(value: Any, prefix: str, arrays: Dict[str, bytes]) -> Any:
    """Replace tensors with entry references, recursively; tuples become lists."""
    if isinstance(value, torch.Tensor):
        name = f"{prefix}/{len(arrays):05d}.npy"
        arrays[name] = _npy_bytes(value)
        return {_TENSOR_KEY: name}
    if isinstance(value, dict):
        return {"items": [[key, _encode(item, prefix, arrays)] for key, item in value.items()]}
    if isinstance(value, (list, tuple)):
        return [_encode(item, prefix, arrays) for item in value]
    return value


def _decode(value: Any, arrays: Mapping[str, bytes]) -> Any:
    if isinstance(value, dict):
        if _TENSOR_KEY in value:
            return _npy_tensor(arrays[value[_TENSOR_KEY]])
        return {key: _decode(item, arrays) for key, item in value["items"]}
    if isinstance(value, list):
        return [_decode(item, arrays) for item in value]
    return value


def _restore_betas(state: Dict[str, Any]) -> Dict[str, Any]:
    for group in state.get("param_groups", []):
        if isinstance(group.get("betas"), list):
            group["betas"] = tuple(group["betas"])
    return state


@dataclass
class Checkpoint:
    """Snapshot of one training stage."""

    stage: str
    params: Dict[str, torch.Tensor]
    iteration: int
    config_hash: str
    optimizer_state: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def capture(
        cls,
        stage: str,
        model: nn.Module,
        iteration: int,
        config_hash: str,
        optimizers: Optional[Mapping[str, torch.optim.Optimizer]] = None,
    ) -> "Checkpoint":
        params = {name: tensor.detach().to("cpu").clone() for name, tensor in model.state_dict().items()}
        optimizer_state = {name: opt.state_dict() for name, opt in (optimizers or {}).items()}
        # Round-trip through the encoder so captured state shares no storage with live optimizers.
        arrays: Dict[str, bytes] = {}
        encoded = {name: _encode(state, f"optimizers/{name}", arrays) for name, state in optimizer_state.items()}
        optimizer_state = {name: _restore_betas(_decode(state, arrays)) for name, state in encoded.items()}
        return cls(stage=stage, params=params, iteration=iteration, config_hash=config_hash, optimizer_state=optimizer_state)

    def restore(self, model: nn.Module, optimizers: Optional[Mapping[str, torch.optim.Optimizer]] = None) -> None:
        """Load parameters (and optimizer state, when given) back into live objects."""
        try:
            model.load_state_dict(self.params)
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint does not match the {self.stage} model: {str(e)}") from e
        for name, optimizer in (optimizers or {}).items():
            if name in self.optimizer_state:
                optimizer.load_state_dict(self.optimizer_state[name])

    def equals(self, other: "Checkpoint") -> bool:
        """Same stage, iteration, hash and bit-identical parameters."""
        if (self.stage, self.iteration, self.config_hash) != (other.stage, other.iteration, other.config_hash):
            return False
        if list(self.params) != list(other.params):
            return False
        return all(torch.equal(self.params[name], other.params[name]) for name in self.params)

    def to_bytes(self) -> bytes:
        arrays: Dict[str, bytes] = {}
        names = list(self.params)
        for index, name in enumerate(names):
            arrays[f"params/{index:05d}.npy"] = _npy_bytes(self.params[name])
        optimizer_json: Dict[str, str] = {}
        for name in sorted(self.optimizer_state):
            encoded = _encode(self.optimizer_state[name], f"optimizers/{name}", arrays)
            optimizer_json[f"optimizers/{name}.json"] = json.dumps(encoded, sort_keys=True, indent=1)

        manifest = CheckpointManifest(
            format_version=self.format_version,
            stage=self.stage,  # type: ignore[arg-type]
            iteration=self.iteration,
            config_hash=self.config_hash,
            params=names,
            optimizers=sorted(self.optimizer_state),
        )
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as archive:
            _write_entry(archive, "manifest.json", json.dumps(manifest.model_dump(), sort_keys=True, indent=2).encode("utf-8"))
            for entry, text in optimizer_json.items():
                _write_entry(archive, entry, text.encode("utf-8"))
            for entry in sorted(arrays):
                _write_entry(archive, entry, arrays[entry])
        return buffer.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, path: Optional[str] = None) -> "Checkpoint":
        """
        Parse a checkpoint archive.

        Raises:
            CheckpointError: If the archive is corrupt or of another format version
        """
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as archive:
                entries = {name: archive.read(name) for name in archive.namelist()}
        except (zipfile.BadZipFile, OSError) as e:
            raise CheckpointError(f"Corrupt checkpoint: {str(e)}", path) from e
        if "manifest.json" not in entries:
            raise CheckpointError("Checkpoint has no manifest", path)
        try:
            manifest = CheckpointManifest.model_validate_json(entries["manifest.json"])
        except ValidationError as e:
            raise CheckpointError(f"Invalid checkpoint manifest: {str(e)}", path) from e
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"Checkpoint format version {manifest.format_version} is not supported "
                f"(expected {CHECKPOINT_FORMAT_VERSION})",
                path,
            )
        try:
            params = {name: _npy_tensor(entries[f"params/{i:05d}.npy"]) for i, name in enumerate(manifest.params)}
            optimizer_state = {
                name: _restore_betas(_decode(json.loads(entries[f"optimizers/{name}.json"]), entries))
                for name in manifest.optimizers
            }
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"Corrupt checkpoint entry: {str(e)}", path) from e
        return cls(
            stage=manifest.stage,
            params=params,
            iteration=manifest.iteration,
            config_hash=manifest.config_hash,
            optimizer_state=optimizer_state,
            format_version=manifest.format_version,
        )

    def save(self, path: Union[str, Path]) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(self.to_bytes())
        logger.info("Saved %s checkpoint at iteration %d to %s", self.stage, self.iteration, target)
        return target

    @classmethod
    def load(
        cls,
        path: Union[str, Path],
        expected_hash: Optional[str] = None,
        stage: Optional[str] = None,
        force: bool = False,
    ) -> "Checkpoint":
        """
        Read a checkpoint file.

        Args:
            path: Checkpoint file
            expected_hash: Config hash the caller's configuration produces
            stage: Required stage, if any
            force: Accept a config hash mismatch (logged as a warning)

        Raises:
            CheckpointError: If the file is missing or corrupt, the stage differs, or the
                config hash differs and force is not set
        """
        source = Path(path)
        try:
            data = source.read_bytes()
        except OSError as e:
            raise CheckpointError(f"Cannot read checkpoint {source}: {str(e)}", str(source)) from e
        checkpoint = cls.from_bytes(data, str(source))
        if stage is not None and checkpoint.stage != stage:
            raise CheckpointError(f"Expected a {stage} checkpoint, {source} holds {checkpoint.stage}", str(source))
        if expected_hash is not None and checkpoint.config_hash != expected_hash:
            if not force:
                raise CheckpointError(
                    f"Config hash mismatch for {source}: checkpoint {checkpoint.config_hash[:12]}, "
                    f"config {expected_hash[:12]}",
                    str(source),
                )
            logger.warning("Loading %s despite config hash mismatch", source)
        return checkpoint


def _write_entry(archive: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    archive.writestr(info, data)
