"""Transformer building blocks for the patch encoder.

All modules operate on arbitrary leading batch dimensions: ``(..., L, F)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass
class EncoderConfig:
    n_blocks: int = 8
    model_dim: int = 512
    n_heads: int = 8
    ff_hidden: int = 512
    patch_len: int = 200

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        for name in ("n_blocks", "model_dim", "n_heads", "ff_hidden", "patch_len"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.n_heads >= 1 and self.model_dim % self.n_heads:
            errors.append(f"model_dim ({self.model_dim}) must be divisible by n_heads ({self.n_heads})")
        if self.model_dim % 2:
            errors.append("model_dim must be even for sinusoidal embeddings")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal_(t: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)


def linear_forward(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """y = x W + b with ``weight`` shaped (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"input feature dim {x.shape[-1]} does not match weight rows {weight.shape[0]}")
    y = x @ weight
    return y if bias is None else y + bias


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        trunc_normal_(self.weight)

    def forward(self, x):
        return linear_forward(x, self.weight, self.bias)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], gain, shift, LN_EPS)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v/out projections.

    ``kv_mask`` is boolean over keys, ``True`` meaning the key is hidden.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = Linear(dim, dim)
        self.k_proj = Linear(dim, dim)
        self.v_proj = Linear(dim, dim)
        self.out_proj = Linear(dim, dim)

    def _split(self, x):
        return x.reshape(*x.shape[:-1], self.n_heads, self.head_dim).transpose(-2, -3)

    def forward(self, q, k, v, kv_mask=None, return_weights=False):
        qh, kh, vh = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        logits = (qh @ kh.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if kv_mask is not None:
            kv_mask = torch.as_tensor(kv_mask, dtype=torch.bool, device=logits.device)
            if bool(kv_mask.all(dim=-1).any()):
                raise ValueError("kv_mask hides every key; at least one key must stay visible")
            # (..., Lk) -> (..., 1 head, 1 query, Lk)
            logits = logits.masked_fill(kv_mask[..., None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (weights @ vh).transpose(-2, -3)
        out = self.out_proj(out.reshape(*out.shape[:-2], -1))
        return (out, weights) if return_weights else out


def multi_head_attention(q, k, v, params: MultiHeadAttention, kv_mask=None):
    return params(q, k, v, kv_mask)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: x'' = x + MHSA(LN(x)); y = x'' + FF(LN(x''))."""

    def __init__(self, dim: int, n_heads: int, ff_hidden: int):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_hidden)

    def forward(self, x, kv_mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, kv_mask)
        return x + self.ff(self.norm2(x))


def sinusoidal_pe(position, dim: int) -> torch.Tensor:
    """pe[2i] = sin(p / 10000^(2i/F)), pe[2i+1] = cos(p / 10000^(2i/F)).

    ``position`` may be a scalar or a tensor of any shape; the result gains a
    trailing axis of size ``dim``.
    """
    if dim % 2:
        raise ValueError(f"sinusoidal PE needs an even dimension, got {dim}")
    pos = torch.as_tensor(position, dtype=torch.float64)
    freqs = torch.pow(10000.0, -torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    angles = pos[..., None] * freqs
    pe = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return pe.reshape(*pos.shape, dim)


class PatchEncoder(nn.Module):
    """Linear patch tokenizer, (masked) sinusoidal PE, and the block stack.

    Every pretext task and the fine-tuning model hold one of these under the
    ``encoder.`` prefix, so checkpoints are interchangeable.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        dim = config.model_dim
        self.tokenizer = Linear(config.patch_len, dim)
        self.pe_mask_token = nn.Parameter(trunc_normal_(torch.empty(dim)))
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, config.n_heads, config.ff_hidden) for _ in range(config.n_blocks)
        )
        self.norm = LayerNorm(dim)

    def tokenize(self, patches: torch.Tensor) -> torch.Tensor:
        return self.tokenizer(patches)

    def positional(self, positions: torch.Tensor, pe_masked: torch.Tensor | None = None) -> torch.Tensor:
        """Sinusoidal codes at ``positions``, with the mask token where ``pe_masked``."""
        dtype = self.pe_mask_token.dtype
        pe = sinusoidal_pe(positions, self.config.model_dim).to(dtype)
        if pe_masked is None:
            return pe
        pe_masked = torch.as_tensor(pe_masked, dtype=torch.bool)
        return torch.where(pe_masked[..., None], self.pe_mask_token.expand_as(pe), pe)

    def embed(self, patches, positions=None, pe_masked=None) -> torch.Tensor:
        """Tokens plus positional codes; ``positions=None`` means no PE at all."""
        tokens = self.tokenize(patches)
        if positions is None:
            return tokens
        return tokens + self.positional(positions, pe_masked)

    def forward(self, tokens: torch.Tensor, kv_mask=None) -> torch.Tensor:
        x = tokens
        for block in self.blocks:
            x = block(x, kv_mask)
        return self.norm(x)


def encoder_forward(tokens, config: EncoderConfig, params: PatchEncoder):
    if params.config != config:
        raise ValueError("encoder parameters were built for a different config")
    return params(tokens)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def expected_parameter_count(config: EncoderConfig) -> int:
    """Closed-form size of a PatchEncoder; used to cross-check the module tree."""
    f, h = config.model_dim, config.ff_hidden
    attn = 4 * (f * f + f)
    ff = f * h + h + h * f + f
    block = attn + ff + 4 * f
    return config.patch_len * f + f + f + config.n_blocks * block + 2 * f
