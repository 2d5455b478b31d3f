"""Synthetic text-to-text tasks, character tokenizer, and proportional mixing.

Five algorithmic generators of uneven difficulty stand in for a real
multi-task benchmark: copy and reverse are learnable by a tiny model, digit
sorting sits in the middle, modular addition and digit-sum parity stay hard,
which keeps the multi-task mixture under genuine tension.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, fields, asdict
from typing import Iterator

import numpy as np

from .config import ConfigError
from .rng import derive_seed

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2

GENERATOR_KINDS = ("copy", "reverse", "sort_digits", "mod_add", "parity")
MOD_ADD_MODULUS = 97


class Tokenizer:
    """Character-level tokenizer: digits, lowercase letters, space and '+'.

    Ids 0..2 are the pad/eos/unk specials.  ``decode(encode(s)) == s`` for
    any string over the character set.
    """

    def __init__(self):
        chars = string.digits + string.ascii_lowercase + " +"
        self.vocab = ["<pad>", "<eos>", "<unk>"] + list(chars)
        self._to_id = {c: i for i, c in enumerate(self.vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self._to_id.get(c, UNK_ID) for c in text]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, UNK_ID):
                continue
            out.append(self.vocab[int(i)])
        return "".join(out)


@dataclass
class TaskSpec:
    """One synthetic task: generator kind, sizes, and its own seed."""

    name: str
    kind: str
    train_size: int
    eval_size: int
    seed: int
    max_input_len: int = 10

    def validate(self) -> None:
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if self.train_size <= 0 or self.eval_size <= 0:
            raise ConfigError(f"task {self.name!r}: sizes must be positive")
        if self.max_input_len <= 0:
            raise ConfigError(f"task {self.name!r}: max_input_len must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown task spec keys: {sorted(unknown)}")
        spec = cls(**raw)
        spec.validate()
        return spec


@dataclass
class Example:
    """Tokenized input/target pair for one task."""

    input_ids: list[int]
    target_ids: list[int]
    task: int


def default_task_specs(seed: int = 0) -> list[TaskSpec]:
    """Five tasks with unequal sizes so proportional mixing is nontrivial."""
    sizes = {"copy": 2000, "reverse": 2000, "sort_digits": 1000,
             "mod_add": 4000, "parity": 1000}
    return [
        TaskSpec(name=kind, kind=kind, train_size=sizes[kind], eval_size=200,
                 seed=derive_seed(seed, "task", kind) % (2 ** 31))
        for kind in GENERATOR_KINDS
    ]


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

_WORD_CHARS = string.ascii_lowercase + string.digits


def _sample_input(kind: str, max_len: int, rng: np.random.Generator) -> str:
    if kind in ("copy", "reverse"):
        n = int(rng.integers(1, max_len + 1))
        return "".join(rng.choice(list(_WORD_CHARS), size=n))
    if kind in ("sort_digits", "parity"):
        n = int(rng.integers(1, max_len + 1))
        return "".join(rng.choice(list(string.digits), size=n))
    if kind == "mod_add":
        # "a+b" must fit max_len; cap each operand's digit count accordingly
        digits = max(1, (max_len - 1) // 2)
        hi = 10 ** digits
        a = int(rng.integers(0, hi))
        b = int(rng.integers(0, hi))
        return f"{a}+{b}"
    raise ConfigError(f"unknown generator kind {kind!r}")


def solve(kind: str, text: str) -> str:
    """Target string for one input; targets are deterministic functions."""
    if kind == "copy":
        return text
    if kind == "reverse":
        return text[::-1]
    if kind == "sort_digits":
        return "".join(sorted(text))
    if kind == "mod_add":
        a, b = text.split("+")
        return str((int(a) + int(b)) % MOD_ADD_MODULUS)
    if kind == "parity":
        # parity of the digit sum: balanced, and genuinely hard for a toy model
        return "even" if sum(int(c) for c in text) % 2 == 0 else "odd"
    raise ConfigError(f"unknown generator kind {kind!r}")


@dataclass
class TaskData:
    spec: TaskSpec
    train: list[tuple[str, str]]
    eval: list[tuple[str, str]]


def generate_task(spec: TaskSpec) -> TaskData:
    """Deterministic train/eval example sets with disjoint inputs.

    Train and eval draw from independent RNG streams; eval additionally
    rejects any input already present in train, so the two sets are disjoint
    by construction.
    """
    spec.validate()

    def draw(split: str, count: int, taken: set[str]) -> list[tuple[str, str]]:
        rng = np.random.default_rng(derive_seed(spec.seed, spec.kind, split))
        out: list[tuple[str, str]] = []
        attempts = 0
        while len(out) < count:
            attempts += 1
            if attempts > 200 * count + 1000:
                raise ConfigError(
                    f"task {spec.name!r}: input space too small for "
                    f"{count} distinct {split} examples")
            text = _sample_input(spec.kind, spec.max_input_len, rng)
            if text in taken:
                continue
            taken.add(text)
            out.append((text, solve(spec.kind, text)))
        return out

    train_inputs: set[str] = set()
    train = draw("train", spec.train_size, train_inputs)
    eval_taken = set(train_inputs)
    eval_rows = draw("eval", spec.eval_size, eval_taken)
    return TaskData(spec=spec, train=train, eval=eval_rows)


def tokenize_pairs(pairs: list[tuple[str, str]], task: int, tokenizer: Tokenizer,
                   max_enc: int, max_dec: int) -> list[Example]:
    """Token id sequences; targets end with EOS. Raises if a pair overflows."""
    out = []
    for inp, tgt in pairs:
        enc = tokenizer.encode(inp) + [EOS_ID]
        dec = tokenizer.encode(tgt) + [EOS_ID]
        if len(enc) > max_enc:
            raise ConfigError(f"input {inp!r} exceeds L_enc={max_enc} after tokenization")
        if len(dec) > max_dec:
            raise ConfigError(f"target {tgt!r} exceeds L_dec={max_dec} after tokenization")
        out.append(Example(input_ids=enc, target_ids=dec, task=task))
    return out


# ---------------------------------------------------------------------------
# mixing
# ---------------------------------------------------------------------------

def mixing_sampler(sizes: list[int], seed: int) -> Iterator[int]:
    """Infinite task-index stream, task tau drawn with probability N_tau / sum N."""
    if not sizes:
        raise ConfigError("mixing_sampler: empty task list")
    if any(n <= 0 for n in sizes):
        raise ConfigError(f"mixing_sampler: sizes must be positive, got {sizes}")
    probs = np.asarray(sizes, dtype=np.float64)
    probs /= probs.sum()
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.choice(len(sizes), p=probs))


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_jsonl(path, task_name: str, pairs: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inp, tgt in pairs:
            fh.write(json.dumps({"task": task_name, "input": inp, "target": tgt}) + "\n")


def read_jsonl(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            pairs.append((row["input"], row["target"]))
    return pairs
