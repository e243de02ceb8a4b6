"""Multi-channel fine-tuning on top of a single-channel pretrained encoder.

Each channel is patched on a fixed 1-patch stride, given standard sinusoidal
PE, encoded, and average-pooled over time into one spatial token. A learnable
query cross-attends over the spatial tokens; a linear layer maps the result
to class logits.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .metrics import ConfusionMatrix, cohens_kappa
from .nn.checkpoint import Checkpoint, CheckpointError, load_module_state
from .nn.layers import EncoderConfig, Linear, MultiHeadAttention, PatchEncoder, trunc_normal_
from .nn.optim import lr_schedule, make_optimizer, optimizer_step
from .signal import fixed_starts


@dataclass
class FinetuneConfig:
    n_classes: int
    epochs: int = 200
    spatial_drop_p: float = 0.5
    class_weights: list[float] | None = None
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 0
    batch_size: int = 32
    channel_noise_std: float = 0.0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.n_classes < 2:
            errors.append("n_classes must be >= 2")
        if not 0 <= self.spatial_drop_p < 1:
            errors.append(f"spatial_drop_p must be in [0, 1), got {self.spatial_drop_p}")
        if self.class_weights is not None:
            if len(self.class_weights) != self.n_classes:
                errors.append("class_weights needs one entry per class")
            elif any(w < 0 for w in self.class_weights):
                errors.append("class_weights must be non-negative")
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


class MultiChannelHead(nn.Module):
    def __init__(self, dim: int, n_heads: int, n_classes: int):
        super().__init__()
        self.query_token = nn.Parameter(trunc_normal_(torch.empty(dim)))
        self.spatial_attention = MultiHeadAttention(dim, n_heads)
        self.classifier = Linear(dim, n_classes)

    def forward(self, spatial_tokens: torch.Tensor, drop_mask=None) -> torch.Tensor:
        q = self.query_token.expand(*spatial_tokens.shape[:-2], 1, -1)
        pooled = self.spatial_attention(q, spatial_tokens, spatial_tokens, drop_mask)
        return self.classifier(pooled.squeeze(-2))


class FinetuneModel(nn.Module):
    def __init__(self, encoder_config: EncoderConfig, n_classes: int):
        super().__init__()
        self.encoder = PatchEncoder(encoder_config)
        self.head = MultiChannelHead(encoder_config.model_dim, encoder_config.n_heads, n_classes)

    @property
    def dtype(self):
        return self.encoder.pe_mask_token.dtype

    def forward(self, windows, drop_mask=None) -> torch.Tensor:
        return self.head(embed_multichannel(windows, self.encoder), drop_mask)


def _normalize_channels(x: torch.Tensor) -> torch.Tensor:
    centered = x - x.mean(-1, keepdim=True)
    var = (centered**2).mean(-1, keepdim=True)
    return centered / torch.sqrt(torch.clamp(var, min=1e-5))


def embed_multichannel(windows, encoder: PatchEncoder) -> torch.Tensor:
    """(..., C, T) windows -> (..., C, F) spatial tokens."""
    x = torch.as_tensor(windows, dtype=encoder.pe_mask_token.dtype)
    m = encoder.config.patch_len
    if x.shape[-1] < m:
        raise ValueError(f"window of {x.shape[-1]} samples is shorter than one patch ({m})")
    starts = fixed_starts(x.shape[-1], m, m)
    patches = _normalize_channels(x)[..., starts[:, None] + np.arange(m)]
    tokens = encoder.embed(patches, torch.as_tensor(starts / m))
    return encoder(tokens).mean(dim=-2)


def spatial_drop_mask(rng: np.random.Generator, batch: int, n_channels: int, p: float) -> np.ndarray:
    """(batch, C) boolean, True = dropped; every row keeps at least one token."""
    mask = rng.random((batch, n_channels)) < p
    for b in range(batch):
        while mask[b].all():
            mask[b] = rng.random(n_channels) < p
    return mask


def classify(spatial_tokens, head: MultiChannelHead, train_mode: bool = False, rng=None, drop_p: float = 0.5):
    drop = None
    if train_mode and drop_p > 0:
        batch_shape = spatial_tokens.shape[:-2]
        n = int(np.prod(batch_shape)) if batch_shape else 1
        drop = torch.as_tensor(spatial_drop_mask(rng, n, spatial_tokens.shape[-2], drop_p).reshape(
            *batch_shape, spatial_tokens.shape[-2]))
    return head(spatial_tokens, drop)


def weighted_cross_entropy(logits: torch.Tensor, labels, weights) -> torch.Tensor:
    """Weight-normalized mean of -w[y] log softmax(logits)[y]; zero when all weights vanish."""
    logits = logits if logits.dim() > 1 else logits[None]
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    w = torch.as_tensor(weights, dtype=logits.dtype)[labels]
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, labels[:, None]).squeeze(-1)
    denom = w.sum()
    if float(denom) == 0.0:
        return (nll * w).sum()
    return (nll * w).sum() / denom


def class_weights_from_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("class counts are all zero")
    k = counts.size
    return np.divide(counts.sum(), k * counts, out=np.zeros_like(counts), where=counts > 0)


def warm_start(model: FinetuneModel, checkpoint: Checkpoint) -> None:
    """Load ``encoder.*`` tensors from any pretext checkpoint; the head stays fresh."""
    tensors = checkpoint.keys_with_prefix("encoder.")
    if not tensors:
        raise CheckpointError("checkpoint holds no encoder.* tensors")
    load_module_state(model.encoder, tensors, what="encoder")


@dataclass
class FinetuneResult:
    best_state: dict
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)


def predict(model: FinetuneModel, data: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            out.append(model(data[i : i + batch_size]))
    return torch.cat(out) if out else torch.empty(0)


def finetune_loop(train, val, config: FinetuneConfig, model: FinetuneModel, rng: np.random.Generator,
                  on_epoch=None) -> FinetuneResult:
    """Train all layers; keep the epoch state with the lowest validation loss.

    ``train`` and ``val`` are WindowStore-like objects with ``data`` and ``labels``.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    for name, store in (("train", train), ("val", val)):
        if int(store.labels.max()) >= config.n_classes:
            raise ValueError(f"{name} labels exceed n_classes={config.n_classes}")
    weights = (np.asarray(config.class_weights) if config.class_weights is not None
               else class_weights_from_counts(np.bincount(train.labels, minlength=config.n_classes)))
    optimizer = make_optimizer(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    best, history = None, []
    val_labels = torch.as_tensor(val.labels.astype(np.int64))
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.epochs, config.warmup_epochs, config.lr)
        model.train()
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            x = train.data[idx]
            if config.channel_noise_std > 0:
                x = _channel_noise(x, config.channel_noise_std, rng)
            tokens = embed_multichannel(x, model.encoder)
            logits = classify(tokens, model.head, True, rng, config.spatial_drop_p)
            loss = weighted_cross_entropy(logits, train.labels[idx].astype(np.int64), weights)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer_step(optimizer, lr)
            losses.append(float(loss.detach()) * len(idx))
        logits = predict(model, val.data, config.batch_size)
        val_loss = float(weighted_cross_entropy(logits, val_labels, weights))
        cm = ConfusionMatrix.from_labels(val.labels, logits.argmax(-1).numpy(), config.n_classes)
        record = {"epoch": epoch, "train_loss": sum(losses) / len(train), "val_loss": val_loss,
                  "val_kappa": cohens_kappa(cm)}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if best is None or val_loss < best.best_val_loss:
            best = FinetuneResult(copy.deepcopy(model.state_dict()), epoch, val_loss)
    best.history = history
    return best


def _channel_noise(x: np.ndarray, std: float, rng) -> np.ndarray:
    """Gaussian noise on one random channel per window."""
    x = np.array(x, copy=True)
    for b in range(len(x)):
        c = int(rng.integers(x.shape[1]))
        x[b, c] += rng.normal(0.0, std * (x[b, c].std() + 1e-12), size=x.shape[-1])
    return x
