from .features import Batch, FeatureSpace, encode, encode_samples, log_bucket
from .network import (
    ModelParams,
    TrainConfig,
    attention_weights,
    forward,
    grad,
    init_params,
    loss,
    loss_and_grad,
    score_batch,
    softmax_loss,
)
from .training import (
    Adam,
    TrainingDiverged,
    TrainLog,
    VocabularyMismatch,
    load_params,
    mean_loss,
    save_params,
    train,
)
