"""Pairwise relative shift targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import PatchSet


@dataclass
class ShiftTargets:
    theta: np.ndarray
    masked_indices: np.ndarray
    t_total: int

    @property
    def n_masked(self) -> int:
        return self.theta.shape[0]


def shift_matrix(starts: np.ndarray, t_total) -> np.ndarray:
    """theta[a, b] = (t_a - t_b) / t_total, for any leading batch dims."""
    starts = np.asarray(starts)
    diff = starts[..., :, None] - starts[..., None, :]
    return diff / np.asarray(t_total, dtype=np.float64)[..., None, None]


def compute_shift_targets(patch_set: PatchSet, t_total: int | None = None) -> ShiftTargets:
    if t_total is None:
        t_total = patch_set.source_length
    idx = patch_set.masked_indices
    if idx.size < 2:
        raise ValueError(f"need at least 2 PE-masked patches to form pairs, got {idx.size}")
    end = int(patch_set.start_times.max()) + patch_set.patch_len
    if t_total < end:
        raise ValueError(f"t_total={t_total} is shorter than the last patch end ({end})")
    # Integer differences are exact, so theta is anti-symmetric bit-for-bit.
    return ShiftTargets(shift_matrix(patch_set.start_times[idx], t_total), idx, int(t_total))


def pair_index_list(targets: ShiftTargets) -> list[tuple[int, int]]:
    n = targets.n_masked
    return [(a, b) for a in range(n) for b in range(n)]
