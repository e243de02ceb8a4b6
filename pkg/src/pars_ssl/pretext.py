"""Common base for pretext-task models (PARS and the baselines)."""

from __future__ import annotations

from torch import nn

from .nn.layers import EncoderConfig, PatchEncoder
from .nn.optim import optimizer_step


class PretextModel(nn.Module):
    """A ``PatchEncoder`` under ``encoder.`` plus task heads.

    Subclasses implement ``batch_loss(windows, rng) -> (loss, stats)``.
    """

    def __init__(self, encoder_config: EncoderConfig, config):
        super().__init__()
        if encoder_config.patch_len != config.patch_len:
            raise ValueError("encoder patch_len and task patch_len differ")
        self.config = config
        self.encoder = PatchEncoder(encoder_config)

    @property
    def dtype(self):
        return self.encoder.pe_mask_token.dtype

    def batch_loss(self, windows, rng):
        raise NotImplementedError

    def training_step(self, windows, optimizer, rng, lr=None) -> tuple[float, dict]:
        self.train()
        optimizer.zero_grad(set_to_none=True)
        loss, stats = self.batch_loss(windows, rng)
        loss.backward()
        optimizer_step(optimizer, lr)
        return float(loss.detach()), stats
