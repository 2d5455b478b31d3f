"""Operator entry point: data generation, training, evaluation, sweeps,
parameter accounting, and attention analysis.

Every subcommand is deterministic given the config and seed; timestamps live
only in run metadata.  Exit codes: 0 success, 2 validation error, 3 numeric
abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .accounting import (count_enumerated, count_formula, estimate_forward_ops,
                         format_ratio)
from .analysis import analyze, dump_records
from .config import ConfigError, HYPER_VARIANTS, ModelConfig
from .data import TaskSpec, Tokenizer, default_task_specs, generate_task, write_jsonl
from .tensor import ShapeError
from .training import (CheckpointError, MetricsRow, NumericAbort, TrainConfig,
                       evaluate, load_checkpoint, param_hash, prepare_tasks,
                       save_checkpoint, train)
from .transformer import Model

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

SWEEP_AXES = ("prompt_len_enc", "prompt_len_dec", "placement", "variant")

# Known divergences from the experimental recipe this lab mirrors; echoed
# into run metadata so results are interpreted with them in mind.
DEVIATIONS = [
    "optimizer: constant-lr adam or sgd (no factored second moments)",
    "attention scores scaled by 1/sqrt(d_h)",
    "character-level tokenizer and synthetic algorithmic tasks",
]


class RunConfig:
    """Validated union of model config, train config, and task specs."""

    def __init__(self, model: ModelConfig, train_cfg: TrainConfig,
                 tasks: list[TaskSpec]):
        self.model = model
        self.train = train_cfg
        self.tasks = tasks
        self.validate()

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        for spec in self.tasks:
            spec.validate()
        names = [spec.name for spec in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names: {names}")
        if self.model.T != len(self.tasks):
            raise ConfigError(
                f"model.T is {self.model.T} but {len(self.tasks)} tasks are "
                f"configured")
        tokenizer = Tokenizer()
        if self.model.vocab != tokenizer.vocab_size:
            raise ConfigError(
                f"model.vocab must be {tokenizer.vocab_size} (tokenizer size), "
                f"got {self.model.vocab}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "tasks": [spec.to_dict() for spec in self.tasks],
        }


def default_run_dict(seed: int = 0) -> dict:
    tokenizer = Tokenizer()
    model = ModelConfig(vocab=tokenizer.vocab_size)
    return {
        "model": model.to_dict(),
        "train": TrainConfig(seed=seed).to_dict(),
        "tasks": [spec.to_dict() for spec in default_task_specs(seed)],
    }


def _parse_set(expr: str) -> tuple[str, str, object]:
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw_value = expr.split("=", 1)
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in ("model", "train"):
        raise ConfigError(
            f"--set keys look like model.<field> or train.<field>, got {key!r}")
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    return parts[0], parts[1], value


def load_run_config(args) -> RunConfig:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}")
    else:
        raw = default_run_dict(seed=args.seed if args.seed is not None else 0)
    unknown = set(raw) - {"model", "train", "tasks"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    raw.setdefault("model", {})
    raw.setdefault("train", {})
    raw.setdefault("tasks", default_run_dict()["tasks"])

    for expr in args.set or []:
        section, field, value = _parse_set(expr)
        if field not in raw[section] and field not in {
            f for f in ModelConfig().to_dict()} | {f for f in TrainConfig().to_dict()}:
            raise ConfigError(f"unknown {section} config key {field!r}")
        raw[section][field] = value
    if args.seed is not None:
        raw["train"]["seed"] = args.seed

    model = ModelConfig.from_dict(raw["model"])
    train_cfg = TrainConfig.from_dict(raw["train"])
    tasks = [TaskSpec.from_dict(t) for t in raw["tasks"]]
    return RunConfig(model, train_cfg, tasks)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "task", "loss", "token_acc", "exact_match"])
        for r in rows:
            writer.writerow([r.step, r.task, f"{r.loss:.6f}",
                             f"{r.token_acc:.6f}", f"{r.exact_match:.6f}"])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args)
    out = _out_dir(args)
    for spec in cfg.tasks:
        data = generate_task(spec)
        write_jsonl(out / f"{spec.name}_train.jsonl", spec.name, data.train)
        write_jsonl(out / f"{spec.name}_eval.jsonl", spec.name, data.eval)
    print(json.dumps({"tasks": [spec.name for spec in cfg.tasks],
                      "out": str(out)}))
    return EXIT_OK


def _train_once(cfg: RunConfig, out: Path | None, quiet: bool = False):
    tokenizer = Tokenizer()
    bundles = prepare_tasks(cfg.tasks, tokenizer, cfg.model)
    model = Model(cfg.model, seed=cfg.train.seed)
    backbone_before = param_hash(model, "backbone")
    conditioned_before = param_hash(model, "conditioned")
    log = None if quiet else (lambda step, loss: print(
        f"step {step}: loss {loss:.4f}", file=sys.stderr))
    history = train(model, bundles, cfg.train, tokenizer, log=log)
    info = {
        "backbone_hash_before": backbone_before,
        "backbone_hash_after": param_hash(model, "backbone"),
        "conditioned_hash_before": conditioned_before,
        "conditioned_hash_after": param_hash(model, "conditioned"),
    }
    info["backbone_unchanged"] = (
        info["backbone_hash_before"] == info["backbone_hash_after"])
    return model, history, info


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = _out_dir(args)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    model, history, hashes = _train_once(cfg, out, quiet=args.quiet)
    save_checkpoint(model, out / "checkpoint.json")
    write_metrics_csv(out / "metrics.csv", history)
    report = count_enumerated(model)
    metadata = {
        "command": "train",
        "config": cfg.to_dict(),
        "seed": cfg.train.seed,
        "deviations": DEVIATIONS,
        "conditioned_count": report.conditioned_count,
        "backbone_count": report.backbone_count,
        "param_ratio": format_ratio(report.ratio),
        **hashes,
        "started_at": started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2)
    final = [r for r in history if r.step == max(r.step for r in history)]
    print(json.dumps({r.task: round(r.exact_match, 4) for r in final}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    model = load_checkpoint(args.checkpoint, expected_config=cfg.model)
    tokenizer = Tokenizer()
    bundles = prepare_tasks(cfg.tasks, tokenizer, cfg.model)
    rows = evaluate(model, bundles, tokenizer)
    out = _out_dir(args)
    write_metrics_csv(out / "eval_metrics.csv", rows)
    print(json.dumps({r.task: {"loss": round(r.loss, 6),
                               "token_acc": round(r.token_acc, 6),
                               "exact_match": round(r.exact_match, 6)}
                      for r in rows}, indent=2))
    return EXIT_OK


def _axis_config(cfg: RunConfig, axis: str, value) -> RunConfig:
    model_dict = cfg.model.to_dict()
    if axis == "variant":
        model_dict["variant"] = value
    elif axis == "placement":
        model_dict["placement"] = value
    elif axis == "prompt_len_enc":
        if cfg.model.variant not in HYPER_VARIANTS or not cfg.model.placed("enc"):
            raise ConfigError(
                "prompt_len_enc sweep needs a hyper-prompt variant with "
                "encoder placement")
        model_dict["l_enc"] = int(value)
    elif axis == "prompt_len_dec":
        if cfg.model.variant not in HYPER_VARIANTS or not cfg.model.placed("dec"):
            raise ConfigError(
                "prompt_len_dec sweep needs a hyper-prompt variant with "
                "decoder placement")
        model_dict["l_dec"] = int(value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return RunConfig(ModelConfig.from_dict(model_dict), cfg.train, cfg.tasks)


def cmd_sweep(args) -> int:
    cfg = load_run_config(args)
    out = _out_dir(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    seen = []
    for v in values:
        if v in seen:
            print(f"warning: duplicate sweep value {v!r} skipped", file=sys.stderr)
            continue
        seen.append(v)

    rows = []
    for value in seen:
        try:
            sub = _axis_config(cfg, args.axis, value)
            model, history, _ = _train_once(sub, None, quiet=True)
            final_step = max(r.step for r in history)
            avg = next(r for r in history
                       if r.step == final_step and r.task == "average")
            report = count_enumerated(model)
            rows.append({"axis": args.axis, "value": value, "status": "ok",
                         "conditioned_params": report.conditioned_count,
                         "avg_exact_match": f"{avg.exact_match:.6f}",
                         "avg_token_acc": f"{avg.token_acc:.6f}"})
        except (ConfigError, NumericAbort, ShapeError) as exc:
            rows.append({"axis": args.axis, "value": value,
                         "status": f"failed: {exc}", "conditioned_params": "",
                         "avg_exact_match": "", "avg_token_acc": ""})
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "status",
                                                "conditioned_params",
                                                "avg_exact_match",
                                                "avg_token_acc"])
        writer.writeheader()
        writer.writerows(rows)
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_count_params(args) -> int:
    cfg = load_run_config(args)
    model = Model(cfg.model, seed=cfg.train.seed)
    report = count_enumerated(model)
    payload = report.to_dict()
    payload["formula_count"] = count_formula(cfg.model)
    payload["forward_ops"] = estimate_forward_ops(
        cfg.model, cfg.model.L_enc, cfg.model.L_dec).forward_ops
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_run_config(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, expected_config=cfg.model)
    else:
        model = Model(cfg.model, seed=cfg.train.seed)
    tokenizer = Tokenizer()
    bundles = prepare_tasks(cfg.tasks, tokenizer, cfg.model)
    stack = args.stack
    if stack == "auto":
        stack = "dec" if cfg.model.placed("dec") else "enc"
    records, report = analyze(model, bundles, tokenizer, stack, limit=args.limit)
    out = _out_dir(args)
    dump_records(records, out / "attention_dump.jsonl")
    with open(out / "analysis.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    print(json.dumps({k: report[k] for k in
                      ("stack", "per_layer_mass", "n_examples", "n_entropies")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptlab",
        description="Multi-task transformer lab with prompt-based task conditioning")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config path")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override model.<field> or train.<field>")
        p.add_argument("--out", default="promptlab_out", help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override train.seed")

    p = sub.add_parser("gen-data", help="write per-task train/eval JSONL files")
    common(p)

    p = sub.add_parser("train", help="train a model and write checkpoint/metrics")
    common(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval sets")
    common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="train once per value of one config axis")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated values for the axis")

    p = sub.add_parser("count-params", help="parameter accounting report")
    common(p)

    p = sub.add_parser("analyze", help="attention mass and entropy report")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--stack", default="auto", choices=("auto", "enc", "dec"))
    p.add_argument("--limit", type=int, default=100)

    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "count-params": cmd_count_params,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, CheckpointError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
