from patternspace.embedding.losses import NonFiniteLoss, kld, modulated_batch_loss, nce_loss
from patternspace.embedding.model import LATENT_DIM, Decoder, Encoder, PatternVAE
from patternspace.embedding.train import (
    Checkpoint,
    PatternVector,
    TrainConfig,
    TrainingDiverged,
    decode,
    embed_arrays,
    embed_patches,
    encode,
    init_checkpoint,
    reparameterize,
    train,
)

__all__ = [
    "LATENT_DIM",
    "Checkpoint",
    "Decoder",
    "Encoder",
    "NonFiniteLoss",
    "PatternVAE",
    "PatternVector",
    "TrainConfig",
    "TrainingDiverged",
    "decode",
    "embed_arrays",
    "embed_patches",
    "encode",
    "init_checkpoint",
    "kld",
    "modulated_batch_loss",
    "nce_loss",
    "reparameterize",
    "train",
]
