"""Checkpoint directories: ``manifest.json`` + ``tensors.bin``.

The blob holds every tensor back to back as little-endian float32. The
manifest lists name, shape, dtype, byte offset and byte length per tensor,
plus a free-form JSON ``meta`` record (training state, configs).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "pars-ssl-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def keys_with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    tmp_blob = path / (BLOB + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for name, value in tensors.items():
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            arr = np.array(value, dtype=_DTYPE, order="C")  # keeps 0-d shapes
            raw = arr.tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "tensors": entries, "meta": meta or {}}
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp_blob, path / BLOB)
    os.replace(tmp_manifest, path / MANIFEST)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path / MANIFEST}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r} "
                              f"v{manifest.get('version')}")
    blob = (path / BLOB).read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor {e['name']} runs past the end of {BLOB}")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(tensors, manifest.get("meta", {}))


def manifest_diff(expected: dict, found: dict) -> list[str]:
    """Human-readable differences between two name -> shape maps."""
    lines = []
    for k in sorted(set(expected) - set(found)):
        lines.append(f"missing: {k}")
    for k in sorted(set(found) - set(expected)):
        lines.append(f"unexpected: {k}")
    for k in sorted(set(expected) & set(found)):
        if tuple(expected[k]) != tuple(found[k]):
            lines.append(f"shape mismatch: {k} expected {tuple(expected[k])} found {tuple(found[k])}")
    return lines


def load_module_state(module: torch.nn.Module, tensors: dict[str, np.ndarray], what: str = "module") -> None:
    """Copy ``tensors`` into ``module`` exactly, or raise with the manifest diff."""
    state = module.state_dict()
    diff = manifest_diff({k: v.shape for k, v in state.items()}, {k: v.shape for k, v in tensors.items()})
    if diff:
        raise CheckpointError(f"{what} does not match checkpoint:\n  " + "\n  ".join(diff))
    with torch.no_grad():
        for k, v in state.items():
            v.copy_(torch.from_numpy(tensors[k]).to(v.dtype))


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def optimizer_tensors(optimizer: torch.optim.Optimizer, names: list[str]) -> tuple[dict, dict]:
    """Flatten AdamW moments into named tensors; returns (tensors, per-param step counts)."""
    tensors, steps = {}, {}
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        st = optimizer.state.get(p)
        if not st:
            continue
        tensors[f"optim.exp_avg.{name}"] = st["exp_avg"]
        tensors[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"]
        steps[name] = float(st["step"])
    return tensors, steps


def restore_optimizer(optimizer: torch.optim.Optimizer, names: list[str], ckpt: Checkpoint, steps: dict) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        if name not in steps:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(steps[name]),
            "exp_avg": torch.from_numpy(ckpt.tensors[f"optim.exp_avg.{name}"]).to(p.dtype).clone(),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim.exp_avg_sq.{name}"]).to(p.dtype).clone(),
        }
