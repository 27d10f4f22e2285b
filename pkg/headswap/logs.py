"""
Logging setup and the line-delimited loss records written during training.
"""

import logging
import sys
import threading
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field

from .types import LogLevel

TRACE = 5
logging.addLevelName(TRACE, "TRACE")

_LEVELS: Dict[str, int] = {
    "off": logging.CRITICAL + 10,
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
    "trace": TRACE,
}

_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

ALIGNER_TERMS = ("adv", "fm", "l1", "perc_vgg", "perc_id", "cos_id", "dice", "emo", "kpt", "gaze")
BLENDER_TERMS = ("adv", "l1", "perc_vgg", "cycle", "cycle_prime", "reg")


def configure_logging(log_level: Optional[LogLevel] = None, log_file: Optional[str] = None) -> logging.Logger:
    """
    Configure the `headswap` logger.

    Args:
        log_level: One of off, error, warn, info, debug, trace
        log_file: Optional file that receives the same records as the terminal

    Returns:
        The package logger
    """
    logger = logging.getLogger("headswap")
    if log_level:
        logger.setLevel(_LEVELS.get(log_level, logging.INFO))
    formatter = logging.Formatter(_FORMAT)
    if not any(getattr(h, "_headswap_console", False) for h in logger.handlers):
        console = logging.StreamHandler(sys.stderr)
        console.setFormatter(formatter)
        console._headswap_console = True  # type: ignore[attr-defined]
        logger.addHandler(console)
    if log_file:
        path = Path(log_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        already = any(
            isinstance(h, logging.FileHandler) and Path(h.baseFilename) == path.resolve() for h in logger.handlers
        )
        if not already:
            handler = logging.FileHandler(path, encoding="utf-8")
            handler.setFormatter(formatter)
            logger.addHandler(handler)
    return logger


class LossRecord(BaseModel):
    """One line of losses.jsonl."""

    stage: Literal["aligner", "blender"]
    iteration: int
    terms: Dict[str, float]
    weighted_total: float
    gaze_active: bool = False
    generator_lr: Optional[float] = None
    discriminator_loss: Optional[float] = None
    grad_norm: Optional[float] = None
    extras: Dict[str, float] = Field(default_factory=dict)


class LossLog:
    """Append-only JSONL writer for LossRecords."""

    def __init__(self, path: Union[str, Path]) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def write(self, record: LossRecord) -> None:
        line = record.model_dump_json()
        with self._lock, self.path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")

    def read(self) -> List[LossRecord]:
        if not self.path.exists():
            return []
        with self.path.open("r", encoding="utf-8") as handle:
            return [LossRecord.model_validate_json(line) for line in handle if line.strip()]
