"""Style-factor decomposed non-autoregressive TTS."""

from styler.config import ModelConfig, TrainConfig
from styler.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    InvalidInput,
    StylerError,
    TrainingDiverged,
    UnknownSpeaker,
)

__version__ = "0.1.0"

FACTORS = ("text", "duration", "pitch", "speaker", "energy", "noise")
AUDIO_FACTORS = ("duration", "pitch", "energy", "noise")

__all__ = [
    "AUDIO_FACTORS",
    "FACTORS",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "InvalidInput",
    "ModelConfig",
    "StylerError",
    "TrainConfig",
    "TrainingDiverged",
    "UnknownSpeaker",
]
