"""Comparison systems: multi-task input prompt tuning and per-task adapters."""

from __future__ import annotations

from .config import ModelConfig
from .tensor import ShapeError, Tensor, concat, matmul, relu, reshape, gather_axis0, tile_leading


class InputPromptTable:
    """Per-task trainable prompts prepended to the encoder input embeddings.

    Prompt rows are attendable by every encoder query, carry no position
    embedding, and never enter the loss.
    """

    def __init__(self, cfg: ModelConfig, register):
        self.T = cfg.T
        self.l = cfg.input_prompt_len()
        self.d = cfg.d
        self.max_total = cfg.L_enc
        self.P_in = register("baseline/enc_input_prompts", (cfg.T, self.l, cfg.d), 0.02)

    def task_rows(self, task: int) -> Tensor:
        if not 0 <= task < self.T:
            raise IndexError(f"task index {task} out of range [0, {self.T})")
        return reshape(gather_axis0(self.P_in, [task]), (self.l, self.d))


def prepend_input_prompts(table: InputPromptTable, emb: Tensor, task: int) -> Tensor:
    """Concatenate a task's prompt rows ahead of (possibly batched) embeddings."""
    if table.l == 0:
        return emb
    L = emb.shape[-2]
    if table.l + L > table.max_total:
        raise ShapeError(
            f"prompt length {table.l} + sequence length {L} exceeds "
            f"maximum {table.max_total}")
    rows = table.task_rows(task)
    if emb.ndim == 2:
        return concat([rows, emb], axis=0)
    batch = emb.shape[0]
    tiled = tile_leading(reshape(rows, (1, table.l, table.d)), batch)
    return concat([tiled, emb], axis=1)


class AdapterStack:
    """Per-(task, layer) bottleneck adapters placed after each FFN sublayer.

    Up-projections start at zero, making a fresh adapter an exact identity
    through its residual connection.
    """

    def __init__(self, cfg: ModelConfig, stack: str, register):
        self.T = cfg.T
        self.M = cfg.layers(stack)
        self.down = []
        self.up = []
        for tau in range(cfg.T):
            prefix = f"baseline/{stack}/task{tau}"
            self.down.append([
                register(f"{prefix}/layer{m}/down", (cfg.d, cfg.adapter_bottleneck), 0.02)
                for m in range(self.M)
            ])
            self.up.append([
                register(f"{prefix}/layer{m}/up", (cfg.adapter_bottleneck, cfg.d), 0.0)
                for m in range(self.M)
            ])


def adapter_apply(adapters: AdapterStack, x: Tensor, task: int, layer: int) -> Tensor:
    """Residual bottleneck transform with the active task's weights."""
    if not 0 <= task < adapters.T:
        raise IndexError(f"task index {task} out of range [0, {adapters.T})")
    if not 0 <= layer < adapters.M:
        raise IndexError(f"layer index {layer} out of range [0, {adapters.M})")
    down = adapters.down[task][layer]
    up = adapters.up[task][layer]
    return x + matmul(relu(matmul(x, down)), up)
