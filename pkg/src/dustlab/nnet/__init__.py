from .checkpoint import (
    CheckpointFormatError,
    average_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from .ctc import CtcInfeasibleError, ctc_loss_grad, decode_ids, encode_labels, min_frames_needed
from .model import (
    DropoutMode,
    ModelConfig,
    Params,
    forward,
    forward_cached,
    init_params,
    subsampled_length,
)
from .train import (
    AugmentPolicy,
    EpochRecord,
    TrainHyper,
    TrainingDivergedError,
    TrainResult,
    lr_schedule,
    train,
)

__all__ = [
    "AugmentPolicy",
    "CheckpointFormatError",
    "CtcInfeasibleError",
    "DropoutMode",
    "EpochRecord",
    "ModelConfig",
    "Params",
    "TrainHyper",
    "TrainResult",
    "TrainingDivergedError",
    "average_checkpoints",
    "ctc_loss_grad",
    "decode_ids",
    "encode_labels",
    "forward",
    "forward_cached",
    "init_params",
    "load_checkpoint",
    "lr_schedule",
    "min_frames_needed",
    "save_checkpoint",
    "subsampled_length",
    "train",
]
