"""Run configuration: INI files with one section per component.

Unknown sections or keys are errors, and validation reports every bad field
in one go.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .baselines import DropPosConfig, MaeConfig, Mp3Config
from .nn.layers import EncoderConfig
from .pars import ParsConfig

TASKS = ("pars", "mae", "mp3", "droppos", "finetune", "scratch")
PRETEXT_TASKS = TASKS[:4]


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunSection:
    task: str = "pars"
    seed: int = 0
    epochs: int = 1000
    batch_size: int = 512
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 100
    checkpoint_every: int = 10
    data: str = ""
    output_dir: str = "runs/default"
    threads: int = 1


@dataclass
class SignalSection:
    sample_rate_hz: float = 200.0
    window_len: int = 6000


@dataclass
class EncoderSection:
    n_blocks: int = 8
    model_dim: int = 512
    n_heads: int = 8
    ff_hidden: int = 512
    patch_len: int = 200


@dataclass
class ParsSection:
    n_patches: int = 40
    gamma_pos: float = 0.8
    decoder: str = "cross_attention"
    sampling: str = "random"


@dataclass
class MaeSection:
    mask_ratio: float = 0.5
    decoder_blocks: int = 1
    loss_on: str = "all"


@dataclass
class Mp3Section:
    kv_mask_ratio: float = 0.5


@dataclass
class DropPosSection:
    mask_ratio: float = 0.5
    pos_drop_ratio: float = 0.75


@dataclass
class FinetuneSection:
    data: str = ""
    pretrained: str = ""
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 0
    spatial_drop_p: float = 0.5
    channel_noise_std: float = 0.0
    split: str = "0.6,0.2,0.2"
    split_seed: int = 0
    manifest: str = ""
    n_subjects: int = 0
    nested_subjects: bool = True


@dataclass
class AblateSection:
    n_patches: str = ""
    gamma_pos: str = ""
    sampling: str = ""
    decoder: str = ""
    seeds: int = 1


SECTIONS = {
    "run": RunSection,
    "signal": SignalSection,
    "encoder": EncoderSection,
    "pars": ParsSection,
    "mae": MaeSection,
    "mp3": Mp3Section,
    "droppos": DropPosSection,
    "finetune": FinetuneSection,
    "ablate": AblateSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    signal: SignalSection = field(default_factory=SignalSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pars: ParsSection = field(default_factory=ParsSection)
    mae: MaeSection = field(default_factory=MaeSection)
    mp3: Mp3Section = field(default_factory=Mp3Section)
    droppos: DropPosSection = field(default_factory=DropPosSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    # -- typed views -------------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**dataclasses.asdict(self.encoder))

    def task_config(self, task: str | None = None):
        task = task or self.run.task
        grid = {"patch_len": self.encoder.patch_len, "window_len": self.signal.window_len}
        if task == "pars":
            return ParsConfig(**grid, **dataclasses.asdict(self.pars))
        if task == "mae":
            return MaeConfig(**grid, **dataclasses.asdict(self.mae))
        if task == "mp3":
            return Mp3Config(**grid, **dataclasses.asdict(self.mp3))
        if task == "droppos":
            return DropPosConfig(**grid, **dataclasses.asdict(self.droppos))
        raise ValueError(f"{task!r} is not a pretext task")

    def split_fractions(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.finetune.split.split(","))

    # -- validation --------------------------------------------------------

    def validate(self, check_paths: bool = True) -> list[str]:
        errors = []
        r = self.run
        if r.task not in TASKS:
            errors.append(f"run.task: unknown task {r.task!r} (choose from {', '.join(TASKS)})")
        for name in ("epochs", "batch_size", "checkpoint_every", "threads"):
            if getattr(r, name) < 1:
                errors.append(f"run.{name}: must be >= 1")
        if r.lr <= 0:
            errors.append("run.lr: must be positive")
        if r.weight_decay < 0:
            errors.append("run.weight_decay: must be non-negative")
        if not 0 <= r.warmup_epochs < r.epochs:
            errors.append("run.warmup_epochs: must be in [0, epochs)")
        if self.signal.sample_rate_hz <= 0:
            errors.append("signal.sample_rate_hz: must be positive")
        if self.signal.window_len < 2:
            errors.append("signal.window_len: must be >= 2")
        errors += [f"encoder: {e}" for e in EncoderConfig.validate(self.encoder)]
        if r.task in PRETEXT_TASKS:
            errors += self._task_errors(r.task)
        f = self.finetune
        if f.epochs < 1 or f.batch_size < 1:
            errors.append("finetune.epochs and finetune.batch_size must be >= 1")
        if not 0 <= f.spatial_drop_p < 1:
            errors.append("finetune.spatial_drop_p: must be in [0, 1)")
        if not 0 <= f.warmup_epochs < max(f.epochs, 1):
            errors.append("finetune.warmup_epochs: must be in [0, epochs)")
        try:
            fr = self.split_fractions()
            if abs(sum(fr) - 1) > 1e-9 or any(x < 0 for x in fr) or not 1 <= len(fr) <= 3:
                errors.append(f"finetune.split: need 1-3 non-negative fractions summing to 1, got {f.split!r}")
        except ValueError:
            errors.append(f"finetune.split: not a comma-separated list of numbers: {f.split!r}")
        if f.n_subjects < 0:
            errors.append("finetune.n_subjects: must be >= 0 (0 = all)")
        if check_paths:
            errors += self._path_errors()
        return errors

    def _task_errors(self, task: str) -> list[str]:
        cls = {"pars": ParsConfig, "mae": MaeConfig, "mp3": Mp3Config, "droppos": DropPosConfig}[task]
        section = getattr(self, task)
        probe = cls.__new__(cls)
        for k, v in {"patch_len": self.encoder.patch_len, "window_len": self.signal.window_len,
                     **dataclasses.asdict(section)}.items():
            setattr(probe, k, v)
        return [f"{task}: {e}" for e in probe.validate()]

    def _path_errors(self) -> list[str]:
        errors = []
        r, f = self.run, self.finetune
        if r.task not in ("finetune", "scratch") and not Path(r.data).is_file():
            errors.append(f"run.data: pretraining store not found: {r.data!r}")
        if r.task in ("finetune", "scratch") and not Path(f.data).is_file():
            errors.append(f"finetune.data: labeled store not found: {f.data!r}")
        if f.pretrained and not Path(f.pretrained).is_dir():
            errors.append(f"finetune.pretrained: checkpoint directory not found: {f.pretrained!r}")
        if f.manifest and not Path(f.manifest).is_file():
            errors.append(f"finetune.manifest: split manifest not found: {f.manifest!r}")
        return errors

    def check(self, check_paths: bool = True) -> RunConfig:
        errors = self.validate(check_paths)
        if errors:
            raise ConfigError(errors)
        return self

    # -- (de)serialization ---------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def override(self, dotted: str, value) -> None:
        section, _, key = dotted.partition(".")
        obj = getattr(self, section)
        setattr(obj, key, _coerce(type(getattr(obj, key)), str(value)))


def _format(v) -> str:
    return "true" if v is True else "false" if v is False else str(v)


def _coerce(kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Overlay ``text`` onto ``base`` (defaults if None); collects every error before raising."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from None
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    cfg = RunConfig(**{name: dataclasses.replace(getattr(cfg, name)) for name in SECTIONS})
    errors = []
    for name in cp.sections():
        if name not in SECTIONS:
            errors.append(f"{source}: unknown section [{name}]")
            continue
        section = getattr(cfg, name)
        types = {f.name: type(f.default) for f in fields(section)}
        for key, raw in cp[name].items():
            if key not in types:
                errors.append(f"{source}: unknown key {name}.{key}")
                continue
            try:
                setattr(section, key, _coerce(types[key], raw))
            except ValueError as exc:
                errors.append(f"{source}: {name}.{key}: {exc}")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path=None, preset: str | None = None) -> RunConfig:
    base = load_preset(preset) if preset else RunConfig()
    if path is None:
        return base
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    return parse_config(path.read_text(), base, source=str(path))


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("pars_ssl.presets").iterdir() if p.name.endswith(".ini"))


def load_preset(name: str) -> RunConfig:
    res = resources.files("pars_ssl.presets") / f"{name}.ini"
    if not res.is_file():
        raise ConfigError([f"unknown preset {name!r} (available: {', '.join(preset_names())})"])
    return parse_config(res.read_text(), source=f"preset:{name}")
