from .losses import (
    EpochMeans,
    MinJerkReconstruct,
    loss_bce_finetune,
    loss_bce_pretrain,
    loss_mse_params,
    loss_reconstruction,
    reconstruct,
    total_loss,
)
from .network import (
    WEIGHTS_VERSION,
    DetectorOutput,
    InvalidWeightsError,
    Tfcn,
    TfcnConfig,
    TfcnWeights,
    WeightsVersionError,
    as_model,
    forward,
    load_weights,
    save_weights,
)
from .training import (
    DESK_SCHEDULE,
    TrainingDivergedError,
    TrainingSchedule,
    TrainResult,
    batch_tensors,
    decompose,
    train,
)
