"""Pairwise relative shift (PARS) pretraining.

Random patches of one channel are tokenized; a random subset of the tokens
has its sinusoidal position code replaced by a shared learnable mask token.
The model must regress the normalized start-time difference for every
ordered pair of those position-masked patches.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .nn.layers import EncoderConfig, LayerNorm, Linear, MultiHeadAttention, PatchEncoder
from .pretext import PretextModel
from .signal import (
    PatchSet,
    Sequence,
    _cut,
    instance_normalize,
    n_pe_masked,
    random_crop,
    spread_starts,
)
from .targets import ShiftTargets, shift_matrix

DECODERS = ("cross_attention", "pairwise_mlp")
SAMPLINGS = ("random", "fixed")
MLP_HIDDEN = 512


@dataclass
class ParsConfig:
    n_patches: int = 40
    patch_len: int = 200
    gamma_pos: float = 0.8
    window_len: int = 6000
    decoder: str = "cross_attention"
    sampling: str = "random"

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.decoder not in DECODERS:
            errors.append(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.sampling not in SAMPLINGS:
            errors.append(f"sampling must be one of {SAMPLINGS}, got {self.sampling!r}")
        if not 0 <= self.gamma_pos <= 1:
            errors.append(f"gamma_pos must be in [0, 1], got {self.gamma_pos}")
        elif self.n_masked < 2:
            errors.append(f"round(gamma_pos * n_patches) = {self.n_masked} but at least 2 PE-masked patches are needed")
        if not 1 <= self.patch_len <= self.window_len:
            errors.append(f"patch_len {self.patch_len} must be in [1, window_len={self.window_len}]")
        return errors

    @property
    def n_masked(self) -> int:
        return n_pe_masked(self.n_patches, self.gamma_pos)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairEmbeddings:
    y_pairs: torch.Tensor
    pair_index: list[tuple[int, int]]


class CrossAttentionDecoder(nn.Module):
    """Pair queries attend over all N patch embeddings; a linear head gives one shift per pair.

    Queries are the pair embeddings projected 2F -> F. The layer is pre-norm
    on the query side, and with ``residual=True`` the projected query is added
    back to the attention output before the head.
    """

    def __init__(self, dim: int, n_heads: int, residual: bool = True):
        super().__init__()
        self.residual = residual
        self.query_proj = Linear(2 * dim, dim)
        self.norm_q = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.head = Linear(dim, 1)

    def forward(self, y, y_pairs):
        q = self.query_proj(y_pairs)
        out = self.attn(self.norm_q(q), y, y)
        if self.residual:
            out = out + q
        return self.head(out).squeeze(-1)


class PairwiseMLPDecoder(nn.Module):
    def __init__(self, dim: int, hidden: int = MLP_HIDDEN):
        super().__init__()
        self.fc1 = Linear(2 * dim, hidden)
        self.fc2 = Linear(hidden, 1)

    def forward(self, y, y_pairs):
        return self.fc2(torch.relu(self.fc1(y_pairs))).squeeze(-1)


class ParsModel(PretextModel):
    def __init__(self, encoder_config: EncoderConfig, config: ParsConfig, residual_decoder: bool = True):
        super().__init__(encoder_config, config)
        dim = encoder_config.model_dim
        if config.decoder == "cross_attention":
            self.decoder = CrossAttentionDecoder(dim, encoder_config.n_heads, residual_decoder)
        else:
            self.decoder = PairwiseMLPDecoder(dim)

    def forward(self, patches, positions, pe_masked, masked_idx):
        """Predicted shift matrix (..., N_m, N_m) for a batch of patch sets."""
        tokens = self.encoder.embed(patches, positions, pe_masked)
        y = self.encoder(tokens)
        pairs = build_pair_embeddings(y, masked_idx)
        flat = self.decoder(y, pairs.y_pairs)
        n_m = masked_idx.shape[-1]
        return flat.reshape(*flat.shape[:-1], n_m, n_m)

    def batch_loss(self, windows, rng):
        return batch_loss(self, draw_pars_batch(windows, self.config, rng)), {}


# ---------------------------------------------------------------------------
# Single-example operations


def patch_positions(start_times, patch_len: int):
    """Fractional patch index used as the sinusoidal PE coordinate."""
    return torch.as_tensor(np.asarray(start_times, dtype=np.float64) / patch_len)


def tokenize_and_embed_positions(patch_set: PatchSet, encoder: PatchEncoder) -> torch.Tensor:
    if patch_set.patch_len != encoder.config.patch_len:
        raise ValueError(f"patch length {patch_set.patch_len} != tokenizer input {encoder.config.patch_len}")
    dtype = encoder.pe_mask_token.dtype
    patches = torch.as_tensor(patch_set.patches, dtype=dtype)
    return encoder.embed(patches, patch_positions(patch_set.start_times, patch_set.patch_len),
                         torch.as_tensor(patch_set.pe_masked))


def build_pair_embeddings(y: torch.Tensor, masked_indices) -> PairEmbeddings:
    """Row-major concatenation [y_a, y_b] over ordered pairs of the masked tokens.

    ``y`` is (..., N, F) and ``masked_indices`` (..., N_m); result is (..., N_m², 2F).
    """
    idx = torch.as_tensor(np.asarray(masked_indices), dtype=torch.long)
    n = y.shape[-2]
    if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= n):
        raise ValueError(f"masked indices must lie in [0, {n})")
    ym = torch.gather(y, -2, idx[..., None].expand(*idx.shape, y.shape[-1]))
    n_m = ym.shape[-2]
    left = ym[..., :, None, :].expand(*ym.shape[:-2], n_m, n_m, ym.shape[-1])
    right = ym[..., None, :, :].expand_as(left)
    pairs = torch.cat([left, right], dim=-1).reshape(*ym.shape[:-2], n_m * n_m, 2 * ym.shape[-1])
    return PairEmbeddings(pairs, [(a, b) for a in range(n_m) for b in range(n_m)])


def cross_attention_decode(y: torch.Tensor, pairs: PairEmbeddings, decoder: CrossAttentionDecoder) -> torch.Tensor:
    return decoder(y, pairs.y_pairs)


def pairwise_mlp_decode(pairs: PairEmbeddings, decoder: PairwiseMLPDecoder) -> torch.Tensor:
    return decoder(None, pairs.y_pairs)


def pars_loss(theta_hat: torch.Tensor, targets) -> torch.Tensor:
    """Mean squared error over every supervised (N_m x N_m) pair."""
    theta = targets.theta if isinstance(targets, ShiftTargets) else targets
    theta = torch.as_tensor(theta, dtype=theta_hat.dtype)
    if theta.shape != theta_hat.shape:
        raise ValueError(f"prediction shape {tuple(theta_hat.shape)} != target shape {tuple(theta.shape)}")
    return torch.mean((theta - theta_hat) ** 2)


# ---------------------------------------------------------------------------
# Batched training


@dataclass
class ParsBatch:
    patches: np.ndarray      # (B, N, M)
    starts: np.ndarray       # (B, N)
    pe_masked: np.ndarray    # (B, N)
    masked_idx: np.ndarray   # (B, N_m)
    theta: np.ndarray        # (B, N_m, N_m)


def prepare_window(window: np.ndarray, window_len: int, rng: np.random.Generator) -> np.ndarray:
    """Pick one channel, random-crop, instance-normalize."""
    window = np.atleast_2d(window)
    ch = window[int(rng.integers(window.shape[0]))]
    cropped = random_crop(ch, window_len, rng)
    return instance_normalize(Sequence(cropped)).samples


def draw_patch_set(x: np.ndarray, config: ParsConfig, rng: np.random.Generator) -> PatchSet:
    n, m = config.n_patches, config.patch_len
    if m > x.size:
        raise ValueError(f"patch length {m} exceeds sequence length {x.size}")
    if config.sampling == "random":
        starts = rng.integers(0, x.size - m + 1, size=n)
    else:
        starts = spread_starts(x.size, m, n)
    pe_masked = np.zeros(n, dtype=bool)
    pe_masked[rng.permutation(n)[: config.n_masked]] = True
    # Token order is shuffled on every draw.
    order = rng.permutation(n)
    return PatchSet(_cut(x, starts, m), starts, pe_masked, x.size).permuted(order)


def draw_pars_batch(windows, config: ParsConfig, rng: np.random.Generator) -> ParsBatch:
    sets = [draw_patch_set(prepare_window(w, config.window_len, rng), config, rng) for w in windows]
    masked_idx = np.stack([ps.masked_indices for ps in sets])
    starts = np.stack([ps.start_times for ps in sets])
    theta = shift_matrix(np.take_along_axis(starts, masked_idx, axis=1), config.window_len)
    return ParsBatch(np.stack([ps.patches for ps in sets]), starts,
                     np.stack([ps.pe_masked for ps in sets]), masked_idx, theta)


def batch_loss(model: ParsModel, batch: ParsBatch) -> torch.Tensor:
    dtype = model.encoder.pe_mask_token.dtype
    theta_hat = model(torch.as_tensor(batch.patches, dtype=dtype),
                      patch_positions(batch.starts, model.config.patch_len),
                      torch.as_tensor(batch.pe_masked), batch.masked_idx)
    # Every example has N_m² pairs, so the mean over the batch equals the mean of per-example losses.
    return pars_loss(theta_hat, batch.theta)


def pars_training_step(windows, config: ParsConfig, model: ParsModel, optimizer, rng, lr=None) -> float:
    if model.config != config:
        raise ValueError("model was built for a different PARS config")
    return model.training_step(windows, optimizer, rng, lr)[0]
