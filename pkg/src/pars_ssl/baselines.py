"""Comparison pretext tasks: MAE, MP3 and DropPos.

All three cut the window into a fixed grid of N = T // M non-overlapping
patches and train the same ``PatchEncoder`` as PARS.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nn.layers import EncoderConfig, LayerNorm, Linear, TransformerBlock, sinusoidal_pe, trunc_normal_
from .pars import prepare_window
from .pretext import PretextModel
from .signal import fixed_starts, n_pe_masked


@dataclass
class GridConfig:
    patch_len: int = 200
    window_len: int = 6000

    @property
    def n_patches(self) -> int:
        return self.window_len // self.patch_len

    def _grid_errors(self) -> list[str]:
        if not 1 <= self.patch_len <= self.window_len:
            return [f"patch_len {self.patch_len} must be in [1, window_len={self.window_len}]"]
        return []

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        return self._grid_errors()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaeConfig(GridConfig):
    mask_ratio: float = 0.5
    decoder_blocks: int = 1
    loss_on: str = "all"

    @property
    def n_masked(self) -> int:
        return n_pe_masked(self.n_patches, self.mask_ratio)

    def validate(self) -> list[str]:
        errors = self._grid_errors()
        if not 0 < self.mask_ratio < 1:
            errors.append(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        elif not errors and self.n_patches - self.n_masked < 1:
            errors.append("mask_ratio leaves no visible patch")
        if self.decoder_blocks < 1:
            errors.append("decoder_blocks must be >= 1")
        if self.loss_on not in ("all", "masked"):
            errors.append(f"loss_on must be 'all' or 'masked', got {self.loss_on!r}")
        return errors


@dataclass
class Mp3Config(GridConfig):
    kv_mask_ratio: float = 0.5

    @property
    def n_hidden(self) -> int:
        return n_pe_masked(self.n_patches, self.kv_mask_ratio)

    def validate(self) -> list[str]:
        errors = self._grid_errors()
        if not 0 <= self.kv_mask_ratio < 1:
            errors.append(f"kv_mask_ratio must be in [0, 1), got {self.kv_mask_ratio}")
        elif not errors and self.n_hidden >= self.n_patches:
            errors.append("kv_mask_ratio hides every token")
        return errors


@dataclass
class DropPosConfig(GridConfig):
    mask_ratio: float = 0.5
    pos_drop_ratio: float = 0.75

    @property
    def n_masked(self) -> int:
        return n_pe_masked(self.n_patches, self.mask_ratio)

    @property
    def n_dropped(self) -> int:
        """Position-dropped (supervised) tokens: round(γ_pos · (1 − γ) · N)."""
        return min(n_pe_masked(self.n_patches, self.pos_drop_ratio * (1 - self.mask_ratio)),
                   self.n_patches - self.n_masked)

    def validate(self) -> list[str]:
        errors = self._grid_errors()
        if not 0 <= self.mask_ratio < 1:
            errors.append(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0 <= self.pos_drop_ratio <= 1:
            errors.append(f"pos_drop_ratio must be in [0, 1], got {self.pos_drop_ratio}")
        if not errors and self.n_dropped < 1:
            errors.append("pos_drop_ratio * (1 - mask_ratio) * N rounds to zero supervised tokens")
        return errors


def prepare_grid_batch(windows, config: GridConfig, rng: np.random.Generator) -> np.ndarray:
    """(B, N, M) non-overlapping patches of one random channel per window."""
    starts = fixed_starts(config.window_len, config.patch_len, config.patch_len)
    idx = starts[:, None] + np.arange(config.patch_len)
    return np.stack([prepare_window(w, config.window_len, rng)[idx] for w in windows])


def _random_subsets(rng, batch: int, n: int, k: int) -> np.ndarray:
    """(batch, n) boolean masks with exactly k True entries each."""
    mask = np.zeros((batch, n), dtype=bool)
    for b in range(batch):
        mask[b, rng.permutation(n)[:k]] = True
    return mask


def _gather_tokens(x, idx):
    return torch.gather(x, 1, idx[..., None].expand(*idx.shape, x.shape[-1]))


class MaeModel(PretextModel):
    """Masked autoencoder: encode visible patches, reconstruct all patches with a shallow decoder."""

    def __init__(self, encoder_config: EncoderConfig, config: MaeConfig):
        super().__init__(encoder_config, config)
        dim = encoder_config.model_dim
        self.mask_token = nn.Parameter(trunc_normal_(torch.empty(dim)))
        self.decoder = nn.ModuleList(
            TransformerBlock(dim, encoder_config.n_heads, encoder_config.ff_hidden)
            for _ in range(config.decoder_blocks)
        )
        self.decoder_norm = LayerNorm(dim)
        self.head = Linear(dim, config.patch_len)

    def forward(self, patches: torch.Tensor, masked: np.ndarray) -> torch.Tensor:
        b, n, _ = patches.shape
        pe = sinusoidal_pe(torch.arange(n), self.encoder.config.model_dim).to(self.dtype)
        tokens = self.encoder.tokenize(patches) + pe
        visible = torch.as_tensor(np.stack([np.flatnonzero(~m) for m in masked]))
        encoded = self.encoder(_gather_tokens(tokens, visible))
        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, visible[..., None].expand_as(encoded), encoded)
        x = full + pe
        for block in self.decoder:
            x = block(x)
        return self.head(self.decoder_norm(x))

    def batch_loss(self, windows, rng):
        patches = prepare_grid_batch(windows, self.config, rng)
        masked = _random_subsets(rng, len(patches), self.config.n_patches, self.config.n_masked)
        x = torch.as_tensor(patches, dtype=self.dtype)
        recon = self(x, masked)
        err = (recon - x) ** 2
        if self.config.loss_on == "masked":
            loss = err[torch.as_tensor(masked)].mean()
        else:
            loss = err.mean()
        with torch.no_grad():
            visible_mse = float(err[torch.as_tensor(~masked)].mean())
        return loss, {"visible_mse": visible_mse}


class Mp3Model(PretextModel):
    """Masked position prediction: classify shuffled tokens into grid positions, no PE anywhere."""

    def __init__(self, encoder_config: EncoderConfig, config: Mp3Config):
        super().__init__(encoder_config, config)
        self.head = Linear(encoder_config.model_dim, config.n_patches)

    def forward(self, patches: torch.Tensor, kv_mask=None) -> torch.Tensor:
        return self.head(self.encoder(self.encoder.tokenize(patches), kv_mask))

    def batch_loss(self, windows, rng, kv_mask_ratio: float | None = None):
        patches = prepare_grid_batch(windows, self.config, rng)
        b, n = patches.shape[:2]
        order = np.stack([rng.permutation(n) for _ in range(b)])
        shuffled = np.take_along_axis(patches, order[..., None], axis=1)
        ratio = self.config.kv_mask_ratio if kv_mask_ratio is None else kv_mask_ratio
        n_hidden = n_pe_masked(n, ratio)
        kv_mask = torch.as_tensor(_random_subsets(rng, b, n, n_hidden)) if n_hidden else None
        logits = self(torch.as_tensor(shuffled, dtype=self.dtype), kv_mask)
        target = torch.as_tensor(order)
        loss = F.cross_entropy(logits.reshape(-1, n), target.reshape(-1))
        acc = float((logits.argmax(-1) == target).float().mean())
        return loss, {"position_acc": acc}


class DropPosModel(PretextModel):
    """Token masking, then position masking of a subset of the kept tokens; classify dropped positions."""

    def __init__(self, encoder_config: EncoderConfig, config: DropPosConfig):
        super().__init__(encoder_config, config)
        self.head = Linear(encoder_config.model_dim, config.n_patches)

    def forward(self, patches, visible_idx, pos_dropped) -> torch.Tensor:
        tokens = _gather_tokens(self.encoder.tokenize(patches), visible_idx)
        tokens = tokens + self.encoder.positional(visible_idx.to(torch.float64), pos_dropped)
        return self.head(self.encoder(tokens))

    def batch_loss(self, windows, rng):
        cfg = self.config
        patches = prepare_grid_batch(windows, cfg, rng)
        b, n = patches.shape[:2]
        n_keep = n - cfg.n_masked
        visible = np.stack([np.sort(rng.permutation(n)[:n_keep]) for _ in range(b)])
        dropped = _random_subsets(rng, b, n_keep, cfg.n_dropped)
        visible_t = torch.as_tensor(visible)
        dropped_t = torch.as_tensor(dropped)
        logits = self(torch.as_tensor(patches, dtype=self.dtype), visible_t, dropped_t)
        sel_logits, sel_target = logits[dropped_t], visible_t[dropped_t]
        loss = F.cross_entropy(sel_logits, sel_target)
        acc = float((sel_logits.argmax(-1) == sel_target).float().mean())
        return loss, {"position_acc": acc}


def mae_step(windows, config: MaeConfig, model: MaeModel, optimizer, rng, lr=None) -> float:
    return model.training_step(windows, optimizer, rng, lr)[0]


def mp3_step(windows, config: Mp3Config, model: Mp3Model, optimizer, rng, lr=None) -> float:
    return model.training_step(windows, optimizer, rng, lr)[0]


def droppos_step(windows, config: DropPosConfig, model: DropPosModel, optimizer, rng, lr=None) -> float:
    return model.training_step(windows, optimizer, rng, lr)[0]
