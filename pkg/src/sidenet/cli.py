"""Command-line entry point: ``sidenet {train,eval,profile-memory,inspect-ckpt,gen-data}``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import autograd as ag
from .checkpoint import CheckpointError, CheckpointMismatchError, load_checkpoint
from .config import TrainConfig, load_config
from .data import save_clip_dir
from .errors import ConfigError, NumericalError
from .heads import write_matrix_csv, write_metrics_csv
from .memory import StrategyDescriptor, compare_strategies, comparison_csv
from .train import evaluate_model, load_model, make_data, train

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--out", default="runs/default", help="output directory")


def _config(args, fallback: Path | None = None) -> TrainConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    extra = list(args.set)
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    if args.dtype is not None:
        extra.append(f"dtype={args.dtype}")
    return load_config(path, extra)


def cmd_train(args) -> int:
    cfg = _config(args)
    result = train(cfg, out_dir=args.out)
    print(json.dumps(result.metrics[-1], sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    cfg = _config(args, fallback=out / "config.txt")
    ckpt = Path(args.ckpt) if args.ckpt else out / "best.s4v"
    model = load_model(cfg, ckpt)
    data = make_data(cfg)
    metrics = evaluate_model(model, data)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "eval.csv", metrics)
    if args.sim_csv and cfg.task == "retrieval":
        with ag.no_grad():
            sim = model.similarity(data.videos, data.tokens, training=False)
        write_matrix_csv(args.sim_csv, sim, [f"video{j}" for j in range(sim.shape[1])])
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_profile(args) -> int:
    cfg = _config(args)
    common = dict(backbone=cfg.vit, batch=cfg.optim.batch, frames=cfg.data.frames,
                  num_classes=cfg.data.num_classes, dtype=cfg.dtype, adapter_dim=args.adapter_dim)
    descs = [
        StrategyDescriptor("full_ft", **common),
        StrategyDescriptor("adapter", **common),
        StrategyDescriptor("side_tuning", side=cfg.side, **common),
    ]
    rows = compare_strategies(descs, measured=args.measured)
    text = comparison_csv(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "memory.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    tensors = load_checkpoint(args.path)
    total = 0
    for name in sorted(tensors):
        arr = tensors[name]
        total += arr.nbytes
        print(f"{name}\t{arr.dtype}\t{list(arr.shape)}")
    print(f"# {len(tensors)} tensors, {total} bytes")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = make_data(cfg)
    save_clip_dir(ds, args.out)
    print(f"wrote {len(ds)} clips to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sidenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write metrics/checkpoints to --out")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (default <out>/best.s4v)")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--sim-csv", help="also write the retrieval similarity matrix here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("profile-memory", help="compare full fine-tuning, adapter and side-tuning memory")
    _common(p)
    p.add_argument("--measured", action="store_true", help="run real training steps instead of the analytic model")
    p.add_argument("--adapter-dim", type=int, default=64)
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("inspect-ckpt", help="list tensors in an S4V1 archive")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("gen-data", help="write synthetic clips as one archive per clip into --out")
    _common(p)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
