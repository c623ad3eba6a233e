from .config import ModelConfig
from .streamspeech import DecoderState, EncoderCache, LossBundle, StreamSpeech, T2UState
from .train import (
    LOG_FIELDS,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    load_model,
    sample_chunk,
    save_model,
    train_multichunk,
)

__all__ = [
    "LOG_FIELDS", "DecoderState", "EncoderCache", "LossBundle", "ModelConfig", "StreamSpeech",
    "T2UState", "TrainConfig", "Trainer", "TrainingDiverged", "load_model", "sample_chunk",
    "save_model", "train_multichunk",
]
