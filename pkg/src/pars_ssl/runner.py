"""Run orchestration behind the CLI: pretraining, fine-tuning, evaluation, sweeps.

Every run directory holds one ``run.json`` record, a line-delimited
``metrics.log`` and a final ``metrics.txt``. Logs contain no timings, so
identical configs and seeds give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .baselines import DropPosModel, MaeModel, Mp3Model
from .config import PRETEXT_TASKS, ConfigError, RunConfig
from .data import SPLITS, UNLABELED, WindowStore, read_manifest, read_store, split_by_subject, \
    subjects_in, subsample_subjects, write_manifest
from .finetune import FinetuneConfig, FinetuneModel, finetune_loop, predict, warm_start
from .metrics import classification_report, write_report
from .nn.checkpoint import CheckpointError, load_checkpoint, load_module_state, module_tensors, \
    optimizer_tensors, restore_optimizer, save_checkpoint
from .nn.layers import EncoderConfig
from .nn.optim import lr_schedule, make_optimizer
from .pars import ParsModel

LOG = "metrics.log"
RECORD = "run.json"
METRICS = "metrics.txt"
CKPT_DIR = "checkpoints"
REPORT_KEYS = ("kappa", "balanced_accuracy", "macro_f1", "auroc")

MODELS = {"pars": ParsModel, "mae": MaeModel, "mp3": Mp3Model, "droppos": DropPosModel}


class RunError(RuntimeError):
    """A run failed for reasons other than its configuration."""


@dataclass
class RunRecord:
    task: str
    seed: int
    config: dict
    code_hash: str
    history: list[dict] = field(default_factory=list)
    final_metrics: dict = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / RECORD
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, run_dir) -> RunRecord:
        return cls(**json.loads((Path(run_dir) / RECORD).read_text()))


def code_hash() -> str:
    """Git-style hash: sha1 over the blob hashes of every package source file."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for path in sorted(root.rglob("*.py")):
        raw = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\x00" % len(raw) + raw).hexdigest()
        h.update(f"{path.relative_to(root).as_posix()} {blob}\n".encode())
    return h.hexdigest()


def format_record(record: dict) -> str:
    parts = []
    for key, value in record.items():
        parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return " ".join(parts)


def parse_log(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line:
            out.append({k: _parse_value(v) for k, v in (kv.split("=", 1) for kv in line.split(" "))})
    return out


def _parse_value(raw: str):
    for kind in (int, float):
        try:
            return kind(raw)
        except ValueError:
            pass
    return raw


def _prepare(cfg: RunConfig, output_dir) -> Path:
    torch.set_num_threads(cfg.run.threads)
    out = Path(output_dir or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    return out


# ---------------------------------------------------------------------------
# Pretraining


def build_pretext_model(cfg: RunConfig, task: str | None = None):
    task = task or cfg.run.task
    torch.manual_seed(cfg.run.seed)
    return MODELS[task](cfg.encoder_config(), cfg.task_config(task))


def load_pretrain_store(cfg: RunConfig) -> WindowStore:
    store = read_store(cfg.run.data)
    if len(store) == 0:
        raise ConfigError([f"run.data: store {cfg.run.data!r} holds no windows"])
    if store.window_len < cfg.signal.window_len:
        raise ConfigError([f"signal.window_len={cfg.signal.window_len} exceeds the store's window "
                           f"length {store.window_len} ({cfg.run.data})"])
    return store


def run_pretrain(cfg: RunConfig, output_dir=None, resume: bool = False, stop_after_epoch: int | None = None,
                 store: WindowStore | None = None) -> RunRecord:
    """Train the configured pretext task; checkpoints every ``checkpoint_every`` epochs and at the end."""
    r = cfg.run
    if r.task not in PRETEXT_TASKS:
        raise ConfigError([f"run.task: {r.task!r} is not a pretext task ({', '.join(PRETEXT_TASKS)})"])
    out = _prepare(cfg, output_dir)
    store = store if store is not None else load_pretrain_store(cfg)
    model = build_pretext_model(cfg)
    names = [n for n, _ in model.named_parameters()]
    optimizer = make_optimizer(model.parameters(), lr=r.lr, weight_decay=r.weight_decay)
    rng = np.random.default_rng(r.seed)
    start, step, checkpoints = 0, 0, []
    log_path = out / LOG
    if resume:
        start, step, checkpoints = _resume(out, model, optimizer, names, rng, cfg)
        kept = [ln for ln in log_path.read_text().splitlines() if ln and int(ln.split(" ")[0][6:]) < start] \
            if log_path.exists() else []
        log_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        log_path.write_text("")
        shutil.rmtree(out / CKPT_DIR, ignore_errors=True)

    for epoch in range(start, r.epochs):
        lr = lr_schedule(epoch, r.epochs, r.warmup_epochs, r.lr)
        order = rng.permutation(len(store))
        total, sums, count = 0.0, {}, 0
        for i in range(0, len(order), r.batch_size):
            idx = order[i : i + r.batch_size]
            loss, stats = model.training_step(store.data[idx], optimizer, rng, lr)
            total += loss * len(idx)
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
            step += 1
        record = {"epoch": epoch, "step": step, "lr": lr, "loss": total / count}
        record.update({k: v / count for k, v in sorted(sums.items())})
        with open(log_path, "a") as fh:
            fh.write(format_record(record) + "\n")
        done = epoch + 1
        if done % r.checkpoint_every == 0 or done == r.epochs:
            path = _save_training_checkpoint(out, model, optimizer, names, rng, cfg, done, step)
            checkpoints = sorted(set(checkpoints) | {str(path)})
        if stop_after_epoch is not None and done >= stop_after_epoch and done < r.epochs:
            break

    history = parse_log(log_path)
    final = {k: v for k, v in history[-1].items() if k not in ("epoch", "step")} if history else {}
    write_report(out / METRICS, {k: float(v) for k, v in final.items()})
    rec = RunRecord(r.task, r.seed, cfg.to_dict(), code_hash(), history, final, checkpoints,
                    {"completed_epochs": history[-1]["epoch"] + 1 if history else 0})
    rec.write(out)
    return rec


def _save_training_checkpoint(out, model, optimizer, names, rng, cfg, epoch, step) -> Path:
    tensors = module_tensors(model)
    moments, steps = optimizer_tensors(optimizer, names)
    tensors.update(moments)
    meta = {
        "kind": "pretrain",
        "task": cfg.run.task,
        "epoch": epoch,
        "step": step,
        "seed": cfg.run.seed,
        "rng_state": rng.bit_generator.state,
        "optim_steps": steps,
        "encoder": cfg.encoder_config().to_dict(),
        "task_config": cfg.task_config().to_dict(),
    }
    path = save_checkpoint(Path(out) / CKPT_DIR / f"epoch_{epoch:04d}", tensors, meta)
    last = Path(out) / CKPT_DIR / "last"
    save_checkpoint(last, tensors, meta)
    return path


def _resume(out, model, optimizer, names, rng, cfg):
    last = Path(out) / CKPT_DIR / "last"
    if not last.is_dir():
        raise RunError(f"--resume: no checkpoint at {last}")
    ckpt = load_checkpoint(last)
    meta = ckpt.meta
    if meta.get("task") != cfg.run.task:
        raise RunError(f"--resume: checkpoint task {meta.get('task')!r} differs from run.task {cfg.run.task!r}")
    model_keys = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    load_module_state(model, model_keys, what=f"{cfg.run.task} model")
    restore_optimizer(optimizer, names, ckpt, meta["optim_steps"])
    rng.bit_generator.state = meta["rng_state"]
    existing = sorted(str(p) for p in (Path(out) / CKPT_DIR).glob("epoch_*")
                      if int(p.name[6:]) <= meta["epoch"])
    return meta["epoch"], meta["step"], existing


# ---------------------------------------------------------------------------
# Fine-tuning and evaluation


def load_labeled_store(path) -> WindowStore:
    store = read_store(path)
    errors = []
    if store.n_classes < 2:
        errors.append(f"finetune.data: store {path!r} declares K={store.n_classes}; need K >= 2")
    n_unlabeled = int((store.labels == UNLABELED).sum())
    if n_unlabeled:
        errors.append(f"finetune.data: {n_unlabeled} window(s) in {path!r} are unlabeled")
    if errors:
        raise ConfigError(errors)
    return store


def resolve_manifest(cfg: RunConfig, store: WindowStore, n_subjects: int | None = None) -> dict[str, str]:
    f = cfg.finetune
    if f.manifest:
        manifest = read_manifest(f.manifest)
        missing = sorted(set(store.subjects) - set(manifest))
        if missing:
            raise ConfigError([f"finetune.manifest: subjects in the store but not the manifest: "
                               f"{', '.join(missing[:10])}" + (" ..." if len(missing) > 10 else "")])
    else:
        manifest = split_by_subject(store.subjects, cfg.split_fractions(), f.split_seed)
    n = n_subjects if n_subjects is not None else f.n_subjects
    if n:
        manifest = subsample_subjects(manifest, n, cfg.run.seed, nested=f.nested_subjects)
    return manifest


def run_finetune(cfg: RunConfig, output_dir=None, pretrained=None, n_subjects: int | None = None,
                 store: WindowStore | None = None) -> RunRecord:
    """Fine-tune (or train from scratch when ``pretrained`` is empty) and score the test split."""
    out = _prepare(cfg, output_dir)
    f = cfg.finetune
    pretrained = pretrained if pretrained is not None else f.pretrained
    if cfg.run.task == "scratch":
        pretrained = ""
    store = store if store is not None else load_labeled_store(f.data)
    manifest = resolve_manifest(cfg, store, n_subjects)
    write_manifest(out / "split.tsv", manifest)
    train, val, test = (store.for_subjects(subjects_in(manifest, s)) for s in SPLITS)
    if len(train) == 0 or len(val) == 0:
        raise ConfigError(["finetune.split: the train and validation splits must both be non-empty"])
    enc = cfg.encoder_config()
    if store.window_len < enc.patch_len:
        raise ConfigError([f"encoder.patch_len={enc.patch_len} exceeds the window length {store.window_len}"])
    torch.manual_seed(cfg.run.seed)
    model = FinetuneModel(enc, store.n_classes)
    if pretrained:
        ckpt = load_checkpoint(pretrained)
        _check_encoder_meta(ckpt.meta, enc, pretrained)
        warm_start(model, ckpt)
    ft = FinetuneConfig(n_classes=store.n_classes, epochs=f.epochs, spatial_drop_p=f.spatial_drop_p, lr=f.lr,
                        weight_decay=f.weight_decay, warmup_epochs=f.warmup_epochs, batch_size=f.batch_size,
                        channel_noise_std=f.channel_noise_std)
    log_path = out / LOG
    log_path.write_text("")

    def on_epoch(rec):
        with open(log_path, "a") as fh:
            fh.write(format_record(rec) + "\n")

    result = finetune_loop(train, val, ft, model, np.random.default_rng(cfg.run.seed), on_epoch)
    model.load_state_dict(result.best_state)
    meta = {"kind": "finetune", "selected_epoch": result.best_epoch, "val_loss": result.best_val_loss,
            "n_classes": store.n_classes, "encoder": enc.to_dict(), "seed": cfg.run.seed,
            "pretrained": str(pretrained or ""), "manifest": manifest}
    best = save_checkpoint(out / CKPT_DIR / "best", module_tensors(model), meta)
    write_report(out / "selection.txt", {"selected_epoch": result.best_epoch, "val_loss": result.best_val_loss})
    final = {"selected_epoch": result.best_epoch, "n_train": len(train)}
    scored = test if len(test) else val
    final.update({f"test_{k}": v for k, v in score(model, scored).items() if k != "subjects"})
    if not len(test):
        final["scored_split"] = "val"
    write_report(out / METRICS, final)
    rec = RunRecord(cfg.run.task, cfg.run.seed, cfg.to_dict(), code_hash(), result.history, final, [str(best)],
                    {"pretrained": str(pretrained or ""), "n_subjects": n_subjects or f.n_subjects})
    rec.write(out)
    return rec


def _check_encoder_meta(meta: dict, enc: EncoderConfig, path) -> None:
    saved = meta.get("encoder")
    if saved is not None and saved != enc.to_dict():
        diffs = [f"{k}: checkpoint {saved.get(k)} vs config {v}" for k, v in enc.to_dict().items()
                 if saved.get(k) != v]
        raise ConfigError([f"finetune.pretrained: encoder config of {path} differs ({'; '.join(diffs)})"])


def score(model: FinetuneModel, store: WindowStore) -> dict:
    """Pooled metrics over all windows plus per-subject metrics."""
    k = model.head.classifier.weight.shape[1]
    logits = predict(model, store.data)
    pred = logits.argmax(-1).numpy()
    probs = torch.softmax(logits, -1).numpy()
    scores = probs[:, 1] if k == 2 else None
    pooled = classification_report(store.labels, pred, k, scores)
    subjects = {}
    subj = np.array(store.subjects)
    for s in sorted(set(store.subjects)):
        sel = subj == s
        subjects[s] = classification_report(store.labels[sel], pred[sel], k)
    return {**pooled, "subjects": subjects}


def run_evaluate(checkpoint, data, split: str = "test", manifest_path=None, output=None) -> dict:
    """Eval-mode inference of a fine-tuned checkpoint on one split of a labeled store."""
    if split not in (*SPLITS, "all"):
        raise ConfigError([f"--split: must be one of {', '.join((*SPLITS, 'all'))}, got {split!r}"])
    ckpt = load_checkpoint(checkpoint)
    meta = ckpt.meta
    if meta.get("kind") != "finetune":
        raise CheckpointError(f"{checkpoint}: not a fine-tuned checkpoint (kind={meta.get('kind')!r})")
    store = load_labeled_store(data)
    if store.n_classes != meta["n_classes"]:
        raise ConfigError([f"{data}: K={store.n_classes} but the checkpoint was trained with K={meta['n_classes']}"])
    model = FinetuneModel(EncoderConfig(**meta["encoder"]), meta["n_classes"])
    load_module_state(model, ckpt.tensors, what="fine-tuning model")
    manifest = read_manifest(manifest_path) if manifest_path else meta.get("manifest", {})
    if split != "all":
        listed = set(subjects_in(manifest, split))
        absent = sorted(listed - set(store.subjects))
        if absent:
            raise ConfigError([f"manifest lists {split} subjects absent from {data}: {', '.join(absent[:10])}"])
        store = store.for_subjects(listed)
    if len(store) == 0:
        raise ConfigError([f"split {split!r} selects no windows from {data}"])
    result = score(model, store)
    report = {"split": split, "n_subjects": len(result["subjects"])}
    if split == "train":
        report["note"] = "evaluated_on_training_split"
    report.update({f"pooled_{k}": v for k, v in result.items() if k != "subjects"})
    for s, rep in result["subjects"].items():
        report.update({f"subject.{s}.{k}": v for k, v in rep.items()})
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        write_report(output, report)
    return report


# ---------------------------------------------------------------------------
# Sweeps


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize_seeds(records: list[RunRecord], out) -> dict:
    keys = sorted({k for r in records for k, v in r.final_metrics.items()
                   if isinstance(v, (int, float)) and not k.startswith("selected")})
    summary = {}
    lines = []
    for k in keys:
        vals = [r.final_metrics[k] for r in records if k in r.final_metrics]
        mean, std = aggregate(vals)
        summary[f"{k}_mean"], summary[f"{k}_std"] = mean, std
        lines.append(f"{k} = {mean:.4f} ± {std:.4f} (n={len(vals)})")
    write_report(Path(out) / METRICS, summary)
    (Path(out) / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def run_seeds(fn, cfg: RunConfig, n_seeds: int, output_dir=None, **kwargs) -> RunRecord:
    """Run ``fn`` for seeds seed..seed+n-1 in ``seed_<s>/`` subdirectories, then aggregate."""
    out = _prepare(cfg, output_dir)
    records = []
    for s in range(cfg.run.seed, cfg.run.seed + n_seeds):
        sub = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=s))
        records.append(fn(sub, out / f"seed_{s}", **kwargs))
    summary = summarize_seeds(records, out)
    rec = RunRecord(cfg.run.task, cfg.run.seed, cfg.to_dict(), code_hash(), [], summary, [],
                    {"seeds": [r.seed for r in records], "runs": [f"seed_{r.seed}" for r in records]})
    rec.write(out)
    return rec


ABLATE_AXES = ("n_patches", "gamma_pos", "sampling", "decoder")


def ablation_grid(cfg: RunConfig) -> list[dict]:
    axes = {}
    for axis in ABLATE_AXES:
        raw = getattr(cfg.ablate, axis).strip()
        if raw:
            kind = type(getattr(cfg.pars, axis))
            axes[axis] = [kind(v.strip()) for v in raw.split(",")]
    if not axes:
        raise ConfigError(["ablate: give at least one of " + ", ".join(f"ablate.{a}" for a in ABLATE_AXES)])
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def run_ablate(cfg: RunConfig, output_dir=None, n_seeds: int | None = None, pretrain_store=None,
               labeled_store=None) -> list[dict]:
    """PARS pretrain + fine-tune per grid cell and seed; failing cells are recorded, not fatal."""
    out = _prepare(cfg, output_dir)
    n_seeds = n_seeds or cfg.ablate.seeds
    cells = ablation_grid(cfg)
    pretrain_store = pretrain_store if pretrain_store is not None else load_pretrain_store(cfg)
    labeled_store = labeled_store if labeled_store is not None else load_labeled_store(cfg.finetune.data)
    rows = []
    for ci, cell in enumerate(cells):
        for s in range(cfg.run.seed, cfg.run.seed + n_seeds):
            sub = RunConfig(**{name: dataclasses.replace(getattr(cfg, name)) for name in dataclasses.asdict(cfg)})
            sub.run.task, sub.run.seed = "pars", s
            for k, v in cell.items():
                setattr(sub.pars, k, v)
            cell_dir = out / f"cell_{ci:02d}" / f"seed_{s}"
            row = {"cell": ci, **cell, "seed": s}
            try:
                sub.check(check_paths=False)
                run_pretrain(sub, cell_dir / "pretrain", store=pretrain_store)
                sub.run.task = "finetune"
                ft = run_finetune(sub, cell_dir / "finetune", pretrained=str(cell_dir / "pretrain" / CKPT_DIR / "last"),
                                  store=labeled_store)
                row.update(status="ok", kappa=ft.final_metrics["test_kappa"],
                           balanced_accuracy=ft.final_metrics["test_balanced_accuracy"])
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                row.update(status="failed: " + " ".join(str(exc).split()), kappa=float("nan"),
                           balanced_accuracy=float("nan"))
            rows.append(row)
    _write_ablation_table(out, cells, rows)
    RunRecord("ablate", cfg.run.seed, cfg.to_dict(), code_hash(), rows,
              {f"cell_{i:02d}_median_kappa": _median_kappa(rows, i) for i in range(len(cells))}, []).write(out)
    return rows


def _median_kappa(rows, cell) -> float:
    vals = [r["kappa"] for r in rows if r["cell"] == cell and r["status"] == "ok"]
    return float(np.median(vals)) if vals else float("nan")


def _write_ablation_table(out, cells, rows) -> None:
    cols = ["cell", *cells[0].keys(), "seed", "status", "kappa", "balanced_accuracy"]
    lines = ["\t".join(cols)] + ["\t".join(str(r[c]) for c in cols) for r in rows]
    (Path(out) / "ablation_runs.tsv").write_text("\n".join(lines) + "\n")
    summary_cols = ["cell", *cells[0].keys(), "n_ok", "median_kappa", "mean_kappa", "std_kappa"]
    lines = ["\t".join(summary_cols)]
    for i, cell in enumerate(cells):
        vals = [r["kappa"] for r in rows if r["cell"] == i and r["status"] == "ok"]
        mean, std = aggregate(vals) if vals else (float("nan"), float("nan"))
        lines.append("\t".join(map(str, [i, *cell.values(), len(vals), _median_kappa(rows, i), mean, std])))
    (Path(out) / "ablation.tsv").write_text("\n".join(lines) + "\n")
