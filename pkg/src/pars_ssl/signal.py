"""Signal containers, preprocessing filters and patch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

DEFAULT_SAMPLE_RATE = 200.0
NORM_EPS = 1e-5
NOTCH_Q = 30.0
# Hamming main-lobe width is ~3.3 / numtaps (normalized to fs).
_HAMMING_WIDTH = 3.3


@dataclass
class Sequence:
    samples: np.ndarray
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE
    channel_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("samples must be a non-empty 1-D array")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples contain NaN or Inf")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def nyquist(self) -> float:
        return self.sample_rate_hz / 2.0

    def with_samples(self, samples: np.ndarray, **meta) -> Sequence:
        return Sequence(samples, self.sample_rate_hz, self.channel_id, {**self.meta, **meta})


@dataclass
class MultiChannelWindow:
    channels: list[Sequence]
    label: int | None = None
    subject_id: str = ""

    def __post_init__(self):
        if not self.channels:
            raise ValueError("a window needs at least one channel")
        n, fs = len(self.channels[0]), self.channels[0].sample_rate_hz
        for ch in self.channels[1:]:
            if len(ch) != n or ch.sample_rate_hz != fs:
                raise ValueError("all channels must share length and sample rate")

    @classmethod
    def from_array(cls, data: np.ndarray, sample_rate_hz: float, label=None, subject_id=""):
        return cls([Sequence(row, sample_rate_hz) for row in np.atleast_2d(data)], label, subject_id)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def sample_rate_hz(self) -> float:
        return self.channels[0].sample_rate_hz

    def as_array(self) -> np.ndarray:
        return np.stack([ch.samples for ch in self.channels])


@dataclass
class PatchSet:
    """N patches of length M cut from one source sequence.

    ``start_times`` are integer sample offsets into the source; ``pe_masked``
    marks the patches whose positional embedding is replaced by the mask token.
    """

    patches: np.ndarray
    start_times: np.ndarray
    pe_masked: np.ndarray
    source_length: int

    def __post_init__(self):
        self.patches = np.asarray(self.patches)
        self.start_times = np.asarray(self.start_times, dtype=np.int64)
        self.pe_masked = np.asarray(self.pe_masked, dtype=bool)
        n = self.patches.shape[0]
        if self.patches.ndim != 2 or self.start_times.shape != (n,) or self.pe_masked.shape != (n,):
            raise ValueError("patches (N, M), start_times (N,) and pe_masked (N,) must agree")
        m = self.patches.shape[1]
        if n and (self.start_times.min() < 0 or self.start_times.max() > self.source_length - m):
            raise ValueError(f"start times must lie in [0, {self.source_length - m}]")

    @property
    def n(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[1]

    @property
    def n_masked(self) -> int:
        return int(self.pe_masked.sum())

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.pe_masked)

    def permuted(self, order) -> PatchSet:
        order = np.asarray(order)
        return PatchSet(self.patches[order], self.start_times[order], self.pe_masked[order], self.source_length)


def n_pe_masked(n: int, gamma_pos: float) -> int:
    # Python's round() is half-to-even; half-up matches the usual reading of round(γ·N).
    return int(np.floor(gamma_pos * n + 0.5))


# ---------------------------------------------------------------------------
# Filtering


def design_bandpass(low_hz: float, high_hz: float, sample_rate_hz: float, transition_hz: float = 0.3):
    """Windowed-sinc (Hamming) bandpass taps, odd length so the delay is an integer."""
    numtaps = int(np.ceil(_HAMMING_WIDTH * sample_rate_hz / transition_hz))
    numtaps += 1 - numtaps % 2
    return sps.firwin(numtaps, [low_hz, high_hz], window="hamming", pass_zero=False, fs=sample_rate_hz)


def bandpass_filter(seq: Sequence, low_hz: float = 0.3, high_hz: float = 75.0) -> Sequence:
    if not 0 < low_hz < high_hz < seq.nyquist:
        raise ValueError(
            f"band edges must satisfy 0 < low < high < Nyquist ({seq.nyquist} Hz); got {low_hz}, {high_hz}"
        )
    taps = design_bandpass(low_hz, high_hz, seq.sample_rate_hz)
    half = taps.size // 2
    # Mirror padding keeps DC and slow drifts from producing edge steps.
    padded = np.pad(seq.samples, half, mode="symmetric")
    out = sps.oaconvolve(padded, taps, mode="valid")
    return seq.with_samples(out)


def notch_filter(seq: Sequence, mains_hz: float = 60.0, q: float = NOTCH_Q) -> Sequence:
    if not 0 < mains_hz < seq.nyquist:
        raise ValueError(f"notch frequency must lie in (0, {seq.nyquist}) Hz, got {mains_hz}")
    b, a = sps.iirnotch(mains_hz, q, fs=seq.sample_rate_hz)
    # Steady-state initial conditions scaled by the first sample; linear in the input.
    zi = sps.lfilter_zi(b, a) * seq.samples[0]
    out, _ = sps.lfilter(b, a, seq.samples, zi=zi)
    return seq.with_samples(out)


def resample(seq: Sequence, target_hz: float) -> Sequence:
    if not target_hz > 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    if target_hz == seq.sample_rate_hz:
        return Sequence(seq.samples.copy(), seq.sample_rate_hz, seq.channel_id, dict(seq.meta))
    n_out = int(np.floor(len(seq) * target_hz / seq.sample_rate_hz + 0.5))
    ratio = Fraction(target_hz / seq.sample_rate_hz).limit_denominator(1000)
    out = sps.resample_poly(seq.samples, ratio.numerator, ratio.denominator, padtype="line")
    if out.size < n_out:
        out = np.pad(out, (0, n_out - out.size), mode="edge")
    return Sequence(out[:n_out], float(target_hz), seq.channel_id, dict(seq.meta))


def instance_normalize(seq: Sequence) -> Sequence:
    """Zero-mean, unit-(population)-variance scaling of one sequence.

    Flat inputs are divided by sqrt(NORM_EPS) instead of their zero std and
    carry ``meta["degenerate"] = True``.
    """
    if len(seq) < 2:
        raise ValueError("instance normalization needs at least 2 samples")
    x = seq.samples
    centered = x - x.mean()
    var = float(np.mean(centered**2))
    degenerate = var < NORM_EPS
    out = centered / np.sqrt(max(var, NORM_EPS))
    return seq.with_samples(out, degenerate=degenerate)


# ---------------------------------------------------------------------------
# Patch sampling


def _check_patch_len(m: int, t: int):
    if m < 1 or m > t:
        raise ValueError(f"patch length {m} must be in [1, {t}] (sequence length)")


def sample_patches_random(seq: Sequence, n: int, m: int, gamma_pos: float, rng: np.random.Generator) -> PatchSet:
    """Draw ``n`` patch starts uniformly (with replacement) and PE-mask a random subset."""
    x = seq.samples
    _check_patch_len(m, x.size)
    if not 0 <= gamma_pos <= 1:
        raise ValueError(f"gamma_pos must be in [0, 1], got {gamma_pos}")
    starts = rng.integers(0, x.size - m + 1, size=n)
    pe_masked = np.zeros(n, dtype=bool)
    pe_masked[rng.permutation(n)[: n_pe_masked(n, gamma_pos)]] = True
    return PatchSet(_cut(x, starts, m), starts, pe_masked, x.size)


def fixed_starts(t: int, m: int, stride: int) -> np.ndarray:
    _check_patch_len(m, t)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return np.arange(0, t - m + 1, stride)


def sample_patches_fixed(seq: Sequence, m: int, stride: int | None = None) -> PatchSet:
    starts = fixed_starts(len(seq), m, m if stride is None else stride)
    return PatchSet(_cut(seq.samples, starts, m), starts, np.zeros(starts.size, dtype=bool), len(seq))


def spread_starts(t: int, m: int, n: int) -> np.ndarray:
    """``n`` starts evenly spaced over [0, t - m] (fixed-grid variant of random sampling)."""
    _check_patch_len(m, t)
    return np.floor(np.linspace(0, t - m, n) + 0.5).astype(np.int64)


def _cut(x: np.ndarray, starts: np.ndarray, m: int) -> np.ndarray:
    return x[np.asarray(starts)[:, None] + np.arange(m)]


def random_crop(x: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[-1] < length:
        raise ValueError(f"sequence of length {x.shape[-1]} is shorter than the window ({length})")
    if x.shape[-1] == length:
        return x
    off = int(rng.integers(0, x.shape[-1] - length + 1))
    return x[..., off : off + length]
