"""Attention instrumentation: prompt attention mass and token entropy.

Operates on per-(example, layer, head) records of row-stochastic attention
scores whose first ``n_prompt`` columns belong to injected prompts.  Mass is
the summed probability that valid queries place on prompt columns; entropy
is computed over the token columns after removing prompt columns and
renormalizing, in nats, averaged across heads so each (example, layer,
query row) yields one value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import Example, Tokenizer, tokenize_pairs
from .tensor import no_grad
from .training import TaskBundle, batch_arrays
from .transformer import Model


@dataclass
class AttentionRecord:
    layer: int
    head: int
    example: int
    scores: np.ndarray            # (Q, n_prompt + K), rows sum to 1
    n_prompt: int
    valid_query_mask: np.ndarray  # (Q,)
    valid_key_mask: np.ndarray    # (n_prompt + K,); prompt columns always valid

    @property
    def prompt_cols(self) -> list[int]:
        return list(range(self.n_prompt))


def records_from_trace(trace: list[dict], stack: str,
                       example_offset: int = 0) -> list[AttentionRecord]:
    """Expand a model's attention trace into per-(example, head) records."""
    records = []
    for entry in trace:
        if entry["stack"] != stack:
            continue
        probs = entry["probs"]  # (B, h, Q, n_prompt + K)
        B, n_heads = probs.shape[0], probs.shape[1]
        n_prompt = entry["n_prompt"]
        for b in range(B):
            key_mask = np.concatenate(
                [np.ones(n_prompt, dtype=bool), entry["key_valid"][b]])
            for head in range(n_heads):
                records.append(AttentionRecord(
                    layer=entry["layer"],
                    head=head,
                    example=example_offset + b,
                    scores=probs[b, head],
                    n_prompt=n_prompt,
                    valid_query_mask=entry["query_valid"][b],
                    valid_key_mask=key_mask,
                ))
    return records


def attention_mass(records: list[AttentionRecord]) -> float:
    """Mean prompt-column probability mass over valid query rows.

    Averaged per record over its valid rows, then across records (heads and
    examples together).  All records must share one layer and prompt length.
    """
    if not records:
        return 0.0
    layers = {r.layer for r in records}
    lengths = {r.n_prompt for r in records}
    if len(layers) > 1 or len(lengths) > 1:
        raise ValueError(
            f"attention_mass: records span layers {sorted(layers)} "
            f"and prompt lengths {sorted(lengths)}")
    l = lengths.pop()
    if l == 0:
        return 0.0
    per_record = []
    for r in records:
        rows = r.scores[r.valid_query_mask]
        if rows.shape[0] == 0:
            continue
        per_record.append(float(rows[:, :l].sum(axis=1).mean()))
    return float(np.mean(per_record)) if per_record else 0.0


def _row_entropy(p: np.ndarray) -> float:
    total = p.sum()
    if total <= 0.0:
        return 0.0  # degenerate row: no token mass once prompts are removed
    q = p / total
    nz = q[q > 0.0]
    return float(-(nz * np.log(nz)).sum())


def token_entropy_distribution(records: list[AttentionRecord]) -> list[float]:
    """One entropy per (example, layer, valid query row).

    Prompt columns are dropped, the remaining valid token columns are
    renormalized to sum 1, and per-head entropies are averaged per row.
    """
    grouped: dict[tuple[int, int], list[AttentionRecord]] = {}
    for r in records:
        grouped.setdefault((r.example, r.layer), []).append(r)
    entropies: list[float] = []
    for key in sorted(grouped):
        heads = sorted(grouped[key], key=lambda r: r.head)
        first = heads[0]
        token_cols = first.valid_key_mask[first.n_prompt:]
        for row in np.nonzero(first.valid_query_mask)[0]:
            per_head = [
                _row_entropy(r.scores[row, r.n_prompt:][token_cols])
                for r in heads
            ]
            entropies.append(float(np.mean(per_head)))
    return entropies


def entropy_histogram(entropies: list[float], max_tokens: int,
                      n_bins: int = 40) -> dict:
    """Fixed binning over [0, ln(max_tokens)] for figure-ready output."""
    top = math.log(max(max_tokens, 2))
    edges = np.linspace(0.0, top, n_bins + 1)
    counts, _ = np.histogram(np.clip(entropies, 0.0, top), bins=edges)
    return {"bins": edges.tolist(), "counts": counts.tolist()}


# ---------------------------------------------------------------------------
# record files
# ---------------------------------------------------------------------------

def dump_records(records: list[AttentionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "layer": r.layer,
                "head": r.head,
                "example": r.example,
                "n_prompt": r.n_prompt,
                "scores": r.scores.tolist(),
                "valid_query_mask": r.valid_query_mask.astype(int).tolist(),
                "valid_key_mask": r.valid_key_mask.astype(int).tolist(),
            }) + "\n")


def load_records(path) -> list[AttentionRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            records.append(AttentionRecord(
                layer=row["layer"],
                head=row["head"],
                example=row["example"],
                scores=np.asarray(row["scores"], dtype=np.float64),
                n_prompt=row["n_prompt"],
                valid_query_mask=np.asarray(row["valid_query_mask"], dtype=bool),
                valid_key_mask=np.asarray(row["valid_key_mask"], dtype=bool),
            ))
    return records


# ---------------------------------------------------------------------------
# model-level pipeline
# ---------------------------------------------------------------------------

def collect_records(model: Model, tasks: list[TaskBundle], tokenizer: Tokenizer,
                    stack: str, limit: int = 100) -> tuple[list[AttentionRecord], int]:
    """Teacher-forced forward over eval examples with attention capture.

    Examples are taken round-robin-by-task up to ``limit`` and forwarded one
    task batch at a time; example ids are globally unique across batches.
    """
    per_task = max(1, limit // max(len(tasks), 1))
    records: list[AttentionRecord] = []
    offset = 0
    for index, bundle in enumerate(tasks):
        pairs = bundle.eval_pairs[:per_task]
        if not pairs:
            continue
        examples = tokenize_pairs(pairs, index, tokenizer,
                                  model.config.L_enc, model.config.L_dec)
        enc, enc_valid, dec_in, dec_valid, _ = batch_arrays(examples)
        model.attention_trace = []
        model.record_attention = True
        try:
            with no_grad():
                model.forward_batch(enc, enc_valid, dec_in, dec_valid, index)
        finally:
            model.record_attention = False
        records.extend(records_from_trace(model.attention_trace, stack, offset))
        model.attention_trace = []
        offset += len(examples)
    return records, offset


def analyze(model: Model, tasks: list[TaskBundle], tokenizer: Tokenizer,
            stack: str, limit: int = 100) -> tuple[list[AttentionRecord], dict]:
    """Full pipeline: capture records and build the figure-ready report."""
    records, n_examples = collect_records(model, tasks, tokenizer, stack, limit)
    n_layers = model.config.M_enc if stack == "enc" else model.config.M_dec
    per_layer_mass = [
        attention_mass([r for r in records if r.layer == layer])
        for layer in range(n_layers)
    ]
    entropies = token_entropy_distribution(records)
    max_tokens = model.config.L_enc if stack == "enc" else model.config.L_dec
    report = {
        "stack": stack,
        "per_layer_mass": per_layer_mass,
        "entropy_histogram": entropy_histogram(entropies, max_tokens),
        "n_examples": n_examples,
        "n_entropies": len(entropies),
    }
    return records, report
