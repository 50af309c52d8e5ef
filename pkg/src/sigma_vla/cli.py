"""Command-line entry point: preprocess → train → eval → check-weights → compare.

Every subcommand accepts ``--config FILE`` (JSON with optional sections
``preprocess``, ``train``, ``eval``), ``--seed`` and ``--out``. Explicit flags
win over config-file values, which win over built-in defaults. The resolved
configuration is written to ``run_config.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .config import dataclass_from_dict, dataclass_to_dict, read_json, write_json
from .errors import ConfigurationError, LoadError, SigmaError
from .policy import HEADS_FILE, LORA_FILE
from .replay import REPORT_FILE, EvalConfig, compare, load_report, run_eval, weight_stats
from .shards import MANIFEST, PreprocessConfig, preprocess
from .training import TrainConfig, format_table, train_loop

RUN_CONFIG = "run_config.json"
log = logging.getLogger("sigma_vla")


@dataclass
class RunConfig:
    command: str
    seed: int | None = None
    out: str | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    inputs: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "seed": self.seed,
            "out": self.out,
            "inputs": self.inputs,
            "preprocess": dataclass_to_dict(self.preprocess),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def echo(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / RUN_CONFIG, self.to_dict())


def _load_config_file(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise LoadError(f"config file not found: {p}")
    data = read_json(p)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{p}: top level must be an object")
    unknown = set(data) - {"seed", "preprocess", "train", "eval"}
    if unknown:
        raise ConfigurationError(f"{p}: unknown sections {sorted(unknown)}")
    return data


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(obj, **changes) if changes else obj


def resolve(args: argparse.Namespace) -> RunConfig:
    file_cfg = _load_config_file(args.config)
    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    pre = dataclass_from_dict(PreprocessConfig, file_cfg.get("preprocess"))
    train = TrainConfig.from_dict(file_cfg["train"]) if "train" in file_cfg else TrainConfig()
    ev = EvalConfig.from_dict(file_cfg["eval"]) if "eval" in file_cfg else EvalConfig()
    cmd = args.command
    if cmd == "preprocess":
        pre = _override(
            pre, episodes=args.episodes, episode_start=args.episode_start,
            episode_length=args.episode_length, horizon=args.horizon, stride=args.stride,
            chunk=args.chunk, min_action_norm=args.min_action_norm, shard_size=args.shard_size, seed=seed,
        )
    elif cmd == "train":
        train = _override(
            train, steps=args.steps, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
            log_every=args.log_every, grad_clip=args.grad_clip, seed=seed, model_seed=args.model_seed,
        )
    elif cmd == "eval":
        tele = None if args.telepathy is None else args.telepathy == "on"
        ev = _override(
            ev, telepathy_on=tele, adapter_on=True if args.adapter else None,
            batch_size=args.batch_size,
            hard_thresholds=tuple(args.hard_thresholds) if args.hard_thresholds else None, seed=seed,
        )
    return RunConfig(cmd, seed, args.out, pre, train, ev)


# ----------------------------------------------------------------------------
# commands


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise LoadError(f"{what} not found at {path} ({hint})")
    return path


def _weights_paths(arg: str) -> tuple[Path, Path | None]:
    """Accept a run directory or the heads file itself."""
    p = Path(arg)
    heads = p / HEADS_FILE if p.is_dir() else p
    _require(heads, "telepathy-head weights", f"expected {HEADS_FILE}; run `sigma-vla train --out DIR` first")
    lora = heads.parent / LORA_FILE
    return heads, (lora if lora.is_file() else None)


def _shards(arg: str) -> Path:
    p = Path(arg)
    _require(p / MANIFEST, "shard manifest", "run `sigma-vla preprocess --out DIR` first")
    return p


def cmd_preprocess(args, run: RunConfig) -> int:
    out = Path(run.out or "shards")
    manifest = preprocess(run.preprocess, out)
    run.echo(out)
    print(
        f"{manifest.episode_count} episodes, {manifest.window_count} windows, "
        f"{manifest.retained_count} retained, {manifest.filtered_count} filtered, "
        f"{len(manifest.shards)} shards → {out}"
    )
    return 0


def cmd_train(args, run: RunConfig) -> int:
    shards = _shards(args.shards)
    out = Path(run.out or "run")
    run.inputs = {"shards": str(shards)}
    result = train_loop(shards, run.train, out_dir=out)
    run.echo(out)
    if result.rows:
        print(format_table(result.rows), end="")
    print(f"weights → {result.heads_path}")
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    shards = _shards(args.shards)
    heads, lora = _weights_paths(args.weights)
    out = Path(run.out or "eval")
    run.inputs = {"shards": str(shards), "weights": str(heads), "lora": str(lora) if lora else None}
    report = run_eval(shards, heads, run.eval, out_dir=out, lora_file=lora)
    run.echo(out)
    print(f"group={report.group} samples={report.num_samples} batches={report.num_batches}")
    for k in ("avg_mse_vector", "avg_mse_chunk", "avg_mse_traj", "avg_tau_l2",
              "avg_semantic_text_alignment", "hard_sample_fraction", "success_rate"):
        print(f"{k}={getattr(report, k):.6f}")
    print(f"report → {out / REPORT_FILE}")
    return 0


def cmd_check_weights(args, run: RunConfig) -> int:
    heads, _ = _weights_paths(args.weights)
    stats = weight_stats(heads)
    print(stats.lines(), end="")
    if run.out:
        out = Path(run.out)
        run.inputs = {"weights": str(heads)}
        run.echo(out)
        (out / "check_a.txt").write_text(stats.lines(), encoding="utf-8")
    return 0


def _report_path(arg: str) -> Path:
    p = Path(arg)
    return _require(p / REPORT_FILE if p.is_dir() else p, "eval report", "run `sigma-vla eval --out DIR` first")


def cmd_compare(args, run: RunConfig) -> int:
    a, b = _report_path(args.a), _report_path(args.b)
    result = compare(load_report(a), load_report(b))
    print(result.summary(), end="")
    if run.out:
        out = Path(run.out)
        run.inputs = {"a": str(a), "b": str(b)}
        run.echo(out)
        write_json(out / "comparison.json", result.to_dict())
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "check-weights": cmd_check_weights,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="sigma-vla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="generate synthetic episodes and write shards")
    p.add_argument("--episodes", type=int)
    p.add_argument("--episode-start", type=int, help="first episode index (use a disjoint range for held-out data)")
    p.add_argument("--episode-length", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--chunk", type=int)
    p.add_argument("--min-action-norm", type=float)
    p.add_argument("--shard-size", type=int)

    p = sub.add_parser("train", parents=[common], help="train LoRA factors and telepathy heads")
    p.add_argument("--shards", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--log-every", type=int)
    p.add_argument("--model-seed", type=int, help="seed for the frozen base (defaults to --seed)")

    p = sub.add_parser("eval", parents=[common], help="offline replay on shards")
    p.add_argument("--shards", required=True)
    p.add_argument("--weights", required=True, help="training output dir or heads file")
    p.add_argument("--telepathy", choices=("on", "off"))
    p.add_argument("--adapter", action="store_true", help="apply the risk gate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hard-thresholds", type=float, nargs=3, metavar=("VEC", "CHK", "TRJ"))

    p = sub.add_parser("check-weights", parents=[common], help="CHECK A statistics of the heads file")
    p.add_argument("--weights", required=True)

    p = sub.add_parser("compare", parents=[common], help="compare two eval reports (b relative to a)")
    p.add_argument("--a", required=True, help="baseline report or eval dir")
    p.add_argument("--b", required=True, help="experimental report or eval dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve(args)
        return COMMANDS[args.command](args, run)
    except (SigmaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
