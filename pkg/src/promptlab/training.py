"""Multi-task training loop, optimizers, evaluation, and checkpointing.

Each step draws one task from the proportional mixing stream and a batch of
that task's examples, computes teacher-forced cross entropy over target
tokens (padding ignored), and applies the optimizer to the trainable subset
of parameters.  ``tune_mode="task_only"`` restricts updates to the
task-conditioned parameters; gradients for the backbone are still computed
but discarded, and the backbone is bit-identical before and after training.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields, asdict

import numpy as np

from .config import ConfigError, ModelConfig
from .data import (EOS_ID, PAD_ID, Example, TaskSpec, Tokenizer, generate_task,
                   mixing_sampler, tokenize_pairs)
from .rng import derive_seed, stream
from .tensor import Tensor, cross_entropy, no_grad
from .transformer import Model, greedy_decode_batch, is_conditioned_path


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, malformed, or inconsistent with the config."""


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    tune_mode: str = "all"
    eval_every: int = 1000
    seed: int = 0
    per_example_mixing: bool = False  # mix tasks within a batch instead of per step

    def validate(self) -> None:
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr < 0:
            # lr == 0 is allowed: it contracts to a null update
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.tune_mode not in ("all", "task_only"):
            raise ConfigError(f"tune_mode must be all or task_only, got {self.tune_mode!r}")
        if self.eval_every <= 0:
            raise ConfigError("eval_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class MetricsRow:
    step: int
    task: str
    loss: float
    token_acc: float
    exact_match: float


@dataclass
class TaskBundle:
    """One task's tokenized training set plus raw eval pairs."""

    name: str
    train_examples: list[Example]
    eval_pairs: list[tuple[str, str]]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.items = sorted(params.items())
        self.lr = lr

    def step(self) -> None:
        for path, p in self.items:
            if p.grad is None:
                continue
            if not math.isfinite(float(p.grad.sum())):
                raise NumericAbort(f"non-finite gradient in {path}")
            p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.items = sorted(params.items())
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {path: np.zeros(p.shape) for path, p in self.items}
        self.v = {path: np.zeros(p.shape) for path, p in self.items}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for path, p in self.items:
            if p.grad is None:
                continue
            g = p.grad
            if not math.isfinite(float(g.sum())):
                raise NumericAbort(f"non-finite gradient in {path}")
            m = self.m[path]
            v = self.v[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: dict[str, Tensor]):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr)
    return Adam(params, cfg.lr)


def trainable_params(model: Model, tune_mode: str) -> dict[str, Tensor]:
    if tune_mode == "all":
        return dict(model.parameters())
    return {path: p for path, p in model.parameters().items()
            if is_conditioned_path(path)}


def zero_grads(model: Model) -> None:
    for p in model.parameters().values():
        p.grad = None


# ---------------------------------------------------------------------------
# hashing and checkpoints
# ---------------------------------------------------------------------------

def param_hash(model: Model, which: str = "all") -> str:
    """SHA-256 over sorted (path, shape, raw float bytes)."""
    digest = hashlib.sha256()
    for path in sorted(model.parameters()):
        if which == "backbone" and is_conditioned_path(path):
            continue
        if which == "conditioned" and not is_conditioned_path(path):
            continue
        tensor = model.parameters()[path]
        digest.update(path.encode("utf-8"))
        digest.update(str(tensor.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.data).tobytes())
    return digest.hexdigest()


CHECKPOINT_FORMAT = "promptlab-checkpoint-v1"


def save_checkpoint(model: Model, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in sorted(model.parameters().items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"))


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Model:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {payload.get('format')!r}")

    config = expected_config or ModelConfig.from_dict(payload["config"])
    model = Model(config, seed=int(payload.get("seed", 0)))
    saved = payload["params"]
    for name in sorted(model.parameters()):
        if name not in saved:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        entry = saved[name]
        tensor = model.parameters()[name]
        if tuple(entry["shape"]) != tensor.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(entry['shape'])} "
                f"vs model {tensor.shape}")
        tensor.data = np.asarray(entry["data"], dtype=np.float64).reshape(tensor.shape)
    extra = set(saved) - set(model.parameters())
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extra)[:3]}")
    return model


# ---------------------------------------------------------------------------
# batching and loss
# ---------------------------------------------------------------------------

def batch_arrays(examples: list[Example]):
    """Pad a batch; decoder input is the target shifted right behind PAD."""
    B = len(examples)
    Le = max(len(ex.input_ids) for ex in examples)
    Ld = max(len(ex.target_ids) for ex in examples)
    enc = np.full((B, Le), PAD_ID, dtype=np.int64)
    enc_valid = np.zeros((B, Le), dtype=bool)
    dec_in = np.full((B, Ld), PAD_ID, dtype=np.int64)
    dec_valid = np.zeros((B, Ld), dtype=bool)
    targets = np.full((B, Ld), PAD_ID, dtype=np.int64)
    for i, ex in enumerate(examples):
        enc[i, :len(ex.input_ids)] = ex.input_ids
        enc_valid[i, :len(ex.input_ids)] = True
        shifted = [PAD_ID] + list(ex.target_ids[:-1])
        dec_in[i, :len(shifted)] = shifted
        dec_valid[i, :len(shifted)] = True
        targets[i, :len(ex.target_ids)] = ex.target_ids
    return enc, enc_valid, dec_in, dec_valid, targets


def batch_loss(model: Model, examples: list[Example], task: int) -> Tensor:
    enc, enc_valid, dec_in, dec_valid, targets = batch_arrays(examples)
    logits = model.forward_batch(enc, enc_valid, dec_in, dec_valid, task)
    return cross_entropy(logits, targets, ignore_index=PAD_ID)


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------

def prepare_tasks(specs: list[TaskSpec], tokenizer: Tokenizer,
                  model_cfg: ModelConfig) -> list[TaskBundle]:
    bundles = []
    for index, spec in enumerate(specs):
        data = generate_task(spec)
        bundles.append(TaskBundle(
            name=spec.name,
            train_examples=tokenize_pairs(data.train, index, tokenizer,
                                          model_cfg.L_enc, model_cfg.L_dec),
            eval_pairs=data.eval,
        ))
    return bundles


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _param_norms(model: Model, top: int = 5) -> str:
    norms = {path: float(np.linalg.norm(t.data))
             for path, t in model.parameters().items()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1])[:top]
    return ", ".join(f"{path}={value:.3e}" for path, value in worst)


def train(model: Model, tasks: list[TaskBundle], cfg: TrainConfig,
          tokenizer: Tokenizer, log=None) -> list[MetricsRow]:
    """Run the multi-task loop; returns the metrics history."""
    cfg.validate()
    if len(tasks) != model.config.T:
        raise ConfigError(
            f"model.T={model.config.T} but {len(tasks)} tasks were provided")
    sizes = [len(t.train_examples) for t in tasks]
    mix = mixing_sampler(sizes, derive_seed(cfg.seed, "mix"))
    batch_rng = stream(cfg.seed, "batch")
    optimizer = make_optimizer(cfg, trainable_params(model, cfg.tune_mode))
    history: list[MetricsRow] = []

    for step in range(1, cfg.steps + 1):
        if cfg.per_example_mixing:
            drawn = [next(mix) for _ in range(cfg.batch_size)]
            loss = None
            total = 0
            for tau in sorted(set(drawn)):
                rows = [i for i, t in enumerate(drawn) if t == tau]
                picks = batch_rng.integers(0, sizes[tau], size=len(rows))
                group = [tasks[tau].train_examples[i] for i in picks]
                tokens = sum(len(ex.target_ids) for ex in group)
                part = batch_loss(model, group, tau) * float(tokens)
                loss = part if loss is None else loss + part
                total += tokens
            loss = loss * (1.0 / total)
        else:
            tau = next(mix)
            picks = batch_rng.integers(0, sizes[tau], size=cfg.batch_size)
            batch = [tasks[tau].train_examples[i] for i in picks]
            loss = batch_loss(model, batch, tau)

        if not np.isfinite(loss.data):
            raise NumericAbort(
                f"non-finite loss at step {step}; largest parameter norms: "
                f"{_param_norms(model)}")
        zero_grads(model)
        loss.backward()
        optimizer.step()

        if log is not None and (step % 100 == 0 or step == 1):
            log(step, float(loss.data))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            history.extend(evaluate(model, tasks, tokenizer, step=step))
    return history


def _token_metrics(model: Model, examples: list[Example], task: int):
    enc, enc_valid, dec_in, dec_valid, targets = batch_arrays(examples)
    with no_grad():
        logits = model.forward_batch(enc, enc_valid, dec_in, dec_valid, task)
        loss = cross_entropy(logits, targets, ignore_index=PAD_ID)
    valid = targets != PAD_ID
    pred = logits.data.argmax(axis=-1)
    acc = float((pred == targets)[valid].mean()) if valid.any() else 0.0
    return float(loss.data), acc


def evaluate(model: Model, tasks: list[TaskBundle], tokenizer: Tokenizer,
             step: int = 0, max_eval: int | None = None) -> list[MetricsRow]:
    """Per-task teacher-forced metrics and greedy exact match, plus the
    unweighted cross-task average row (task name "average")."""
    rows: list[MetricsRow] = []
    for index, bundle in enumerate(tasks):
        pairs = bundle.eval_pairs[:max_eval] if max_eval else bundle.eval_pairs
        examples = tokenize_pairs(pairs, index, tokenizer,
                                  model.config.L_enc, model.config.L_dec)
        loss, token_acc = _token_metrics(model, examples, index)
        max_len = min(model.config.L_dec,
                      max(len(ex.target_ids) for ex in examples) + 1)
        decoded = greedy_decode_batch(
            model, [ex.input_ids for ex in examples], index, max_len)
        hits = sum(1 for ids, (_, tgt) in zip(decoded, pairs)
                   if tokenizer.decode(ids) == tgt)
        rows.append(MetricsRow(step=step, task=bundle.name, loss=loss,
                               token_acc=token_acc,
                               exact_match=hits / len(pairs)))
    rows.append(MetricsRow(
        step=step, task="average",
        loss=float(np.mean([r.loss for r in rows])),
        token_acc=float(np.mean([r.token_acc for r in rows])),
        exact_match=float(np.mean([r.exact_match for r in rows])),
    ))
    return rows
