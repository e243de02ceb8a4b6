"""Command-line entry point: ``pars-ssl {pretrain,finetune,evaluate,ablate,gen-data}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, load_config, preset_names
from .data import gen_chirp_corpus, gen_classification_corpus, write_store
from .runner import run_ablate, run_evaluate, run_finetune, run_pretrain, run_seeds


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file; overlays the preset (or built-in defaults)")
    p.add_argument("--preset", help=f"start from a bundled preset ({', '.join(preset_names())})")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--output", type=Path, help="run directory (default: run.output_dir)")
    p.add_argument("--seeds", type=int, default=1, help="run seeds seed..seed+N-1 and report mean ± std")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pars-ssl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a pretext task (pars, mae, mp3, droppos)")
    _config_args(p)
    p.add_argument("--task", help="overrides run.task")
    p.add_argument("--data", help="overrides run.data (unlabeled or labeled window store)")
    p.add_argument("--resume", action="store_true", help="continue from <output>/checkpoints/last")
    p.add_argument("--stop-after-epoch", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("finetune", help="fine-tune a pretrained encoder, or train from scratch")
    _config_args(p)
    p.add_argument("--data", help="overrides finetune.data (labeled window store)")
    p.add_argument("--pretrained", help="pretraining checkpoint directory; omit for the scratch baseline")
    p.add_argument("--subjects", type=int, help="keep N training subjects (label-efficiency runs)")

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint on one split")
    p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint directory (…/checkpoints/best)")
    p.add_argument("--data", required=True, help="labeled window store")
    p.add_argument("--split", default="test", help="train, val, test or all (default: test)")
    p.add_argument("--manifest", help="split manifest (default: the one stored in the checkpoint)")
    p.add_argument("--output", type=Path, help="write the key=value report here")

    p = sub.add_parser("ablate", help="PARS pretrain + fine-tune over a grid from the [ablate] section")
    _config_args(p)

    p = sub.add_parser("gen-data", help="write a synthetic window store")
    p.add_argument("kind", choices=("chirp", "classification"))
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--count", type=int, default=256, help="windows (chirp) or windows per class")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--window-len", type=int, default=400, help="samples per window")
    p.add_argument("--sample-rate", type=float, default=100.0)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--windows-per-subject", type=int, default=1)
    p.add_argument("--direction", choices=("random", "up"), default="random", help="chirp sweep direction")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolve_config(args):
    cfg = load_config(args.config, args.preset)
    errors = []
    for item in args.set:
        key, sep, value = item.partition("=")
        try:
            if not sep:
                raise ValueError("expected SECTION.KEY=VALUE")
            cfg.override(key.strip(), value)
        except (AttributeError, ValueError) as exc:
            errors.append(f"--set {item!r}: {exc}")
    if errors:
        raise ConfigError(errors)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.seeds < 1:
        raise ConfigError(["--seeds must be >= 1"])
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    if args.task:
        cfg.run.task = args.task
    if args.data:
        cfg.run.data = args.data
    errors = cfg.validate()
    if cfg.run.task in ("finetune", "scratch"):
        errors.insert(0, f"run.task: {cfg.run.task!r} cannot be pretrained (choose pars, mae, mp3 or droppos)")
    if errors:
        raise ConfigError(errors)
    if args.seeds > 1:
        if args.resume:
            raise ConfigError(["--resume cannot be combined with --seeds"])
        rec = run_seeds(run_pretrain, cfg, args.seeds, args.output)
    else:
        rec = run_pretrain(cfg, args.output, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
    _print_metrics(rec.final_metrics)
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    if args.data:
        cfg.finetune.data = args.data
    if args.pretrained is not None:
        cfg.finetune.pretrained = args.pretrained
    cfg.run.task = "finetune" if cfg.finetune.pretrained else "scratch"
    if args.subjects is not None:
        if args.subjects < 1:
            raise ConfigError(["--subjects must be >= 1"])
        cfg.finetune.n_subjects = args.subjects
    cfg.check()
    if args.seeds > 1:
        rec = run_seeds(run_finetune, cfg, args.seeds, args.output)
    else:
        rec = run_finetune(cfg, args.output)
    _print_metrics(rec.final_metrics)
    return 0


def cmd_evaluate(args) -> int:
    for flag, path in (("--checkpoint", args.checkpoint), ("--data", args.data), ("--manifest", args.manifest)):
        if path and not Path(path).exists():
            raise ConfigError([f"{flag}: not found: {path}"])
    report = run_evaluate(args.checkpoint, args.data, args.split, args.manifest, args.output)
    _print_metrics({k: v for k, v in report.items() if not k.startswith("subject.")})
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    cfg.run.task = "pars"
    errors = cfg.validate()
    if not Path(cfg.finetune.data).is_file():
        errors.append(f"finetune.data: labeled store not found: {cfg.finetune.data!r}")
    if errors:
        raise ConfigError(errors)
    rows = run_ablate(cfg, args.output, n_seeds=args.seeds if args.seeds > 1 else None)
    failed = sum(not r["status"] == "ok" for r in rows)
    print(f"cells_run={len(rows)} failed={failed}")
    return 0


def cmd_gen_data(args) -> int:
    if args.count < 1 or args.window_len < 2 or args.sample_rate <= 0 or args.channels < 1:
        raise ConfigError(["gen-data: --count, --window-len, --sample-rate and --channels must be positive"])
    if args.kind == "chirp":
        store = gen_chirp_corpus(args.count, args.window_len, args.sample_rate, args.seed,
                                 n_channels=args.channels, direction=args.direction)
    else:
        store = gen_classification_corpus(args.count, args.classes, args.window_len, args.sample_rate, args.seed,
                                          n_channels=args.channels, windows_per_subject=args.windows_per_subject)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    write_store(args.output, store)
    print(f"wrote {len(store)} windows ({store.n_channels} ch x {store.window_len} samples) to {args.output}")
    return 0


def _print_metrics(metrics: dict) -> None:
    for k in sorted(metrics):
        v = metrics[k]
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report, don't dump a traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
