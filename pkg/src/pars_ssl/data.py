"""Window stores, subject-level splits, and synthetic corpora for desk-scale runs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

MAGIC = b"PARSWIN\x00"
VERSION = 1
UNLABELED = 255
SPLITS = ("train", "val", "test")
# magic, version, C, T, sample_rate_hz, K, subject-id width, count
_HEADER = struct.Struct("<8sHIIdHHQ")


class CorruptStoreError(ValueError):
    pass


@dataclass
class WindowStore:
    data: np.ndarray          # (count, C, T) float32
    labels: np.ndarray        # (count,) uint8, UNLABELED for none
    subjects: list[str]
    sample_rate_hz: float
    n_classes: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError("window data must be shaped (count, C, T)")
        self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        if len(self.labels) != len(self.data) or len(self.subjects) != len(self.data):
            raise ValueError("labels and subjects must have one entry per window")
        labeled = self.labels[self.labels != UNLABELED]
        if labeled.size and self.n_classes and labeled.max() >= self.n_classes:
            raise ValueError(f"label {labeled.max()} out of range for K={self.n_classes}")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def window_len(self) -> int:
        return self.data.shape[2]

    def subset(self, mask_or_idx) -> WindowStore:
        idx = np.flatnonzero(mask_or_idx) if np.asarray(mask_or_idx).dtype == bool else np.asarray(mask_or_idx)
        return WindowStore(self.data[idx], self.labels[idx], [self.subjects[i] for i in idx],
                           self.sample_rate_hz, self.n_classes)

    def for_subjects(self, subjects) -> WindowStore:
        keep = set(subjects)
        return self.subset(np.array([s in keep for s in self.subjects], dtype=bool))

    def class_counts(self) -> np.ndarray:
        lab = self.labels[self.labels != UNLABELED]
        return np.bincount(lab, minlength=self.n_classes)


def write_store(path, store: WindowStore) -> None:
    encoded = [s.encode("utf-8") for s in store.subjects]
    width = max((len(e) for e in encoded), default=0)
    count, c, t = store.data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, c, t, float(store.sample_rate_hz), store.n_classes, width, count))
        for i in range(count):
            fh.write(store.data[i].astype("<f4", copy=False).tobytes())
            fh.write(bytes([int(store.labels[i])]))
            fh.write(encoded[i].ljust(width, b"\x00"))


def read_store(path) -> WindowStore:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptStoreError(f"{path}: file shorter than the store header")
    magic, version, c, t, fs, k, width, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptStoreError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptStoreError(f"{path}: unsupported store version {version}")
    rec = c * t * 4 + 1 + width
    expected = _HEADER.size + count * rec
    if len(raw) != expected:
        raise CorruptStoreError(f"{path}: expected {expected} bytes for {count} records, found {len(raw)}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(count, rec)
    data = body[:, : c * t * 4].copy().view("<f4").reshape(count, c, t).astype(np.float32)
    labels = body[:, c * t * 4].copy()
    subjects = [bytes(r[c * t * 4 + 1 :]).rstrip(b"\x00").decode("utf-8") for r in body]
    return WindowStore(data, labels, subjects, fs, k)


# ---------------------------------------------------------------------------
# Splits


def _split_sizes(n: int, fractions) -> list[int]:
    """Floor each share, then hand the remainder to the largest fractions first."""
    raw = [n * f for f in fractions]
    sizes = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(fractions)), key=lambda i: (-fractions[i], i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_by_subject(subjects, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> dict[str, str]:
    fractions = tuple(float(f) for f in fractions)
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    if len(fractions) > len(SPLITS):
        raise ValueError(f"at most {len(SPLITS)} splits are supported")
    unique = sorted(set(subjects))
    used = sum(f > 0 for f in fractions)
    if len(unique) < used:
        raise ValueError(f"{len(unique)} subjects cannot fill {used} non-empty splits")
    sizes = _split_sizes(len(unique), fractions)
    order = np.random.default_rng(seed).permutation(len(unique))
    manifest, pos = {}, 0
    for name, size in zip(SPLITS, sizes):
        for i in order[pos : pos + size]:
            manifest[unique[i]] = name
        pos += size
    return manifest


def subsample_subjects(manifest: dict[str, str], n: int, seed: int = 0, nested: bool = True) -> dict[str, str]:
    """Keep ``n`` train subjects; val/test entries are untouched.

    With ``nested=True`` the train subjects are ranked once per seed, so a
    smaller subset is always contained in a larger one. ``nested=False``
    draws an independent subset for every ``n``.
    """
    train = sorted(s for s, split in manifest.items() if split == "train")
    if n > len(train):
        raise ValueError(f"requested {n} train subjects but only {len(train)} are available")
    rng = np.random.default_rng(seed if nested else [seed, n])
    keep = {train[i] for i in rng.permutation(len(train))[:n]}
    return {s: split for s, split in manifest.items() if split != "train" or s in keep}


def subjects_in(manifest: dict[str, str], split: str) -> list[str]:
    return sorted(s for s, v in manifest.items() if v == split)


def write_manifest(path, manifest: dict[str, str]) -> None:
    lines = [f"{s}\t{manifest[s]}" for s in sorted(manifest)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> dict[str, str]:
    manifest = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ValueError(f"{path}:{lineno}: expected '<subject>\\t<train|val|test>'")
        if parts[0] in manifest:
            raise ValueError(f"{path}:{lineno}: subject {parts[0]!r} listed twice")
        manifest[parts[0]] = parts[1]
    return manifest


# ---------------------------------------------------------------------------
# Synthetic corpora


def _add_noise(x: np.ndarray, snr_db: float, rng) -> np.ndarray:
    p = np.mean(x**2)
    return x + rng.normal(0.0, np.sqrt(p / 10 ** (snr_db / 10)), size=x.shape)


def chirp(t: np.ndarray, f0: float, f1: float, phase: float = 0.0) -> np.ndarray:
    """Linear chirp sweeping f0 -> f1 over the span of ``t`` (seconds)."""
    dur = t[-1] - t[0] if t.size > 1 else 1.0
    k = (f1 - f0) / dur
    tt = t - t[0]
    return np.sin(2 * np.pi * (f0 * tt + 0.5 * k * tt**2) + phase)


def gen_chirp_corpus(count: int, T: int, sample_rate: float, seed: int = 0, n_channels: int = 1,
                     f_range=(1.0, 40.0), snr_db: float = 10.0, min_sweep_hz: float = 0.0,
                     direction: str = "random") -> WindowStore:
    """Noisy linear chirps; instantaneous frequency encodes time within the window.

    Start and end frequencies are redrawn until they differ by at least
    ``min_sweep_hz`` (a near-flat chirp carries no timing information).
    ``direction="up"`` sorts them so every window sweeps upward, which makes
    absolute time readable from a single patch.
    """
    if direction not in ("random", "up"):
        raise ValueError(f"direction must be 'random' or 'up', got {direction!r}")
    if count < 1 or T < 2 or sample_rate <= 0:
        raise ValueError("count, T and sample_rate must be positive (T >= 2)")
    if min_sweep_hz >= f_range[1] - f_range[0]:
        raise ValueError("min_sweep_hz must be smaller than the frequency range")
    rng = np.random.default_rng(seed)
    t = np.arange(T) / sample_rate
    data = np.empty((count, n_channels, T), dtype=np.float32)
    for i in range(count):
        f0, f1 = rng.uniform(*f_range, size=2)
        while abs(f1 - f0) < min_sweep_hz:
            f0, f1 = rng.uniform(*f_range, size=2)
        if direction == "up":
            f0, f1 = min(f0, f1), max(f0, f1)
        for c in range(n_channels):
            data[i, c] = _add_noise(chirp(t, f0, f1, rng.uniform(0, 2 * np.pi)), snr_db, rng)
    return WindowStore(data, np.full(count, UNLABELED, np.uint8), [f"chirp{i:05d}" for i in range(count)], sample_rate)


CLASS_BANDS = ((2.0, 5.0), (8.0, 12.0), (16.0, 24.0), (26.0, 32.0), (34.0, 40.0))


def _band_noise(T, fs, band, rng):
    sos = sps.butter(4, band, btype="bandpass", fs=fs, output="sos")
    x = sps.sosfiltfilt(sos, rng.normal(size=T + 200))[100:-100]
    return x / (x.std() + 1e-12)


def _transients(T, fs, rate_hz, rng):
    """Short Gaussian-windowed 14 Hz bursts at a Poisson rate."""
    out = np.zeros(T)
    n = rng.poisson(rate_hz * T / fs)
    width = int(0.25 * fs)
    tt = np.arange(-width, width + 1) / fs
    burst = np.exp(-0.5 * (tt / 0.08) ** 2) * np.sin(2 * np.pi * 14 * tt)
    for c in rng.integers(0, T, size=n):
        lo, hi = max(0, c - width), min(T, c + width + 1)
        out[lo:hi] += 2.5 * burst[lo - (c - width) : hi - (c - width)]
    return out


def gen_classification_corpus(count_per_class: int, K: int, T: int, sample_rate: float, seed: int = 0,
                              n_channels: int = 1, windows_per_subject: int = 1, noise: float = 1.0,
                              class_strength: float = 1.0) -> WindowStore:
    """K-class corpus: class k is band-limited noise in its own band plus a class-specific transient rate.

    Channels share the class signal and get independent background noise.
    Windows are grouped into subjects of ``windows_per_subject`` consecutive
    windows of the same class.
    """
    if K < 2 or K > len(CLASS_BANDS):
        raise ValueError(f"K must be in [2, {len(CLASS_BANDS)}]")
    if count_per_class < 1:
        raise ValueError("count_per_class must be positive")
    rng = np.random.default_rng(seed)
    total = count_per_class * K
    data = np.empty((total, n_channels, T), dtype=np.float32)
    labels = np.repeat(np.arange(K), count_per_class).astype(np.uint8)
    subjects = []
    for i, k in enumerate(labels):
        shared = class_strength * _band_noise(T, sample_rate, CLASS_BANDS[k], rng)
        shared = shared + _transients(T, sample_rate, 0.25 * (k + 1), rng)
        for c in range(n_channels):
            background = np.cumsum(rng.normal(size=T))
            background = (background - background.mean()) / (background.std() + 1e-12)
            data[i, c] = shared + noise * (background + 0.5 * rng.normal(size=T))
        subjects.append(f"c{k}s{(i % count_per_class) // windows_per_subject:04d}")
    return WindowStore(data, labels, subjects, sample_rate, K)


def bandpower_features(data: np.ndarray, sample_rate: float, bands=CLASS_BANDS) -> np.ndarray:
    """Log band power per band, averaged over channels; (count, n_bands)."""
    f, pxx = sps.welch(data, fs=sample_rate, nperseg=min(256, data.shape[-1]), axis=-1)
    feats = [np.log(pxx[..., (f >= lo) & (f < hi)].mean(-1) + 1e-12).mean(-1) for lo, hi in bands]
    return np.stack(feats, axis=-1)
