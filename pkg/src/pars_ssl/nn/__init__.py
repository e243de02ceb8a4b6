from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .layers import (
    EncoderConfig,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PatchEncoder,
    TransformerBlock,
    count_parameters,
    encoder_forward,
    layer_norm,
    linear_forward,
    multi_head_attention,
    sinusoidal_pe,
)
from .optim import NonFiniteGradientError, lr_schedule, make_optimizer, optimizer_step
