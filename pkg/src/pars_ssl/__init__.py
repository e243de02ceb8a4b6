"""Pairwise relative shift pretraining for patch-based transformer encoders on time series."""

from .config import ConfigError, RunConfig, load_config, load_preset
from .finetune import FinetuneConfig, FinetuneModel, finetune_loop
from .nn.layers import EncoderConfig, PatchEncoder
from .pars import ParsConfig, ParsModel
from .baselines import DropPosConfig, DropPosModel, MaeConfig, MaeModel, Mp3Config, Mp3Model

__version__ = "0.1.0"
