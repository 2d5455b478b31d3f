"""Toy encoder-decoder transformer whose self-attention takes injected prompts.

Pre-norm residual blocks, learned absolute position embeddings for tokens,
and a key/value prompt hook in every self-attention layer.  Prompts are task
memory, not sequence positions: they carry no position embedding and are
visible to every query even under the causal mask.  Cross-attention is never
prompted.

Sequences are processed with a leading batch axis internally; the public
single-example entry points wrap the batched path with B=1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import AdapterStack, InputPromptTable, adapter_apply, prepend_input_prompts
from .conditioning import PromptPair, StackConditioning
from .config import ConfigError, HYPER_VARIANTS, ModelConfig
from .data import EOS_ID, PAD_ID
from .rng import stream
from .tensor import (Tensor, ShapeError, concat, gather_axis0, layer_norm, matmul,
                     no_grad, relu, reshape, softmax, swap_axes, tile_leading)

# Additive attention mask value: large but finite, so masked scores stay
# representable while their softmax mass underflows to exactly zero.
MASKED = -1e30


@dataclass
class AttentionLayer:
    W_q: Tensor  # (d, h*d_h)
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor  # (h*d_h, d)
    h: int
    d_h: int


@dataclass
class Block:
    attn: AttentionLayer
    attn_gain: Tensor
    cross: AttentionLayer | None
    cross_gain: Tensor | None
    ffn_w1: Tensor
    ffn_w2: Tensor
    ffn_gain: Tensor


def _fold_heads(x: Tensor, h: int, d_h: int) -> Tensor:
    """(B, L, h*d_h) -> (B*h, L, d_h); one node for the reshape/transpose pair."""
    B, L, hd = x.shape
    out = x.data.reshape(B, L, h, d_h).transpose(0, 2, 1, 3).reshape(B * h, L, d_h)

    def backward(g: np.ndarray):
        return (g.reshape(B, h, L, d_h).transpose(0, 2, 1, 3).reshape(B, L, hd),)

    return Tensor._from_op(out, (x,), backward)


def _unfold_heads(x: Tensor, batch: int, h: int) -> Tensor:
    _, L, d_h = x.shape
    out = x.data.reshape(batch, h, L, d_h).transpose(0, 2, 1, 3).reshape(batch, L, h * d_h)

    def backward(g: np.ndarray):
        return (g.reshape(batch, L, h, d_h).transpose(0, 2, 1, 3).reshape(batch * h, L, d_h),)

    return Tensor._from_op(out, (x,), backward)


_TRIL_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _tril(Lq: int, Lk: int) -> np.ndarray:
    cached = _TRIL_CACHE.get((Lq, Lk))
    if cached is None:
        cached = np.tril(np.ones((Lq, Lk), dtype=bool))
        _TRIL_CACHE[(Lq, Lk)] = cached
    return cached


def _attention_mask(key_valid: np.ndarray, n_prompt: int, causal: bool,
                    Lq: int, h: int) -> np.ndarray:
    B, Lk = key_valid.shape
    allowed = np.broadcast_to(key_valid[:, None, :], (B, Lq, Lk))
    if causal:
        allowed = allowed & _tril(Lq, Lk)
    if n_prompt:
        prompt_cols = np.ones((B, Lq, n_prompt), dtype=bool)
        allowed = np.concatenate([prompt_cols, allowed], axis=2)
    mask = np.where(allowed, 0.0, MASKED)
    return np.repeat(mask[:, None, :, :], h, axis=1).reshape(B * h, Lq, n_prompt + Lk)


def _attention(model: "Model | None", stack: str, layer_idx: int, kind: str,
               q_src: Tensor, kv_src: Tensor, layer: AttentionLayer,
               prompts: PromptPair | None, causal: bool,
               key_valid: np.ndarray, query_valid: np.ndarray) -> Tensor:
    B, Lq, _ = q_src.shape
    h, d_h = layer.h, layer.d_h
    q = _fold_heads(matmul(q_src, layer.W_q), h, d_h)
    k = _fold_heads(matmul(kv_src, layer.W_k), h, d_h)
    v = _fold_heads(matmul(kv_src, layer.W_v), h, d_h)

    n_prompt = 0
    if prompts is not None and prompts.length > 0:
        n_prompt = prompts.length
        k = concat([tile_leading(swap_axes(prompts.P_k, 0, 1), B), k], axis=1)
        v = concat([tile_leading(swap_axes(prompts.P_v, 0, 1), B), v], axis=1)

    scores = matmul(q, swap_axes(k, 1, 2)) * (1.0 / np.sqrt(d_h))
    mask = _attention_mask(key_valid, n_prompt, causal, Lq, h)
    probs = softmax(scores + Tensor(mask), axis=-1)

    if model is not None and model.record_attention and kind == "self":
        model.attention_trace.append({
            "stack": stack,
            "layer": layer_idx,
            "n_prompt": n_prompt,
            "probs": probs.data.reshape(B, h, Lq, n_prompt + key_valid.shape[1]).copy(),
            "query_valid": query_valid.copy(),
            "key_valid": key_valid.copy(),
        })

    out = _unfold_heads(matmul(probs, v), B, h)
    return matmul(out, layer.W_o)


def _check_prompt_shapes(prompts: PromptPair, layer: AttentionLayer) -> None:
    if prompts.P_k.shape != prompts.P_v.shape:
        raise ShapeError(
            f"prompt pair shapes differ: {prompts.P_k.shape} vs {prompts.P_v.shape}")
    if prompts.P_k.ndim != 3 or prompts.P_k.shape[1:] != (layer.h, layer.d_h):
        raise ShapeError(
            f"prompt shape {prompts.P_k.shape} does not match "
            f"(l, {layer.h}, {layer.d_h})")


def self_attention(x: Tensor, layer: AttentionLayer,
                   prompts: PromptPair | None = None,
                   causal: bool = False) -> Tensor:
    """(L, d) self-attention with optional key/value prompt injection."""
    if prompts is not None:
        _check_prompt_shapes(prompts, layer)
    L, d = x.shape
    x3 = reshape(x, (1, L, d))
    valid = np.ones((1, L), dtype=bool)
    out = _attention(None, "", 0, "self", x3, x3, layer, prompts, causal, valid, valid)
    return reshape(out, (L, d))


class Model:
    """Encoder-decoder transformer plus the configured task conditioning.

    Parameters live in a flat ``path -> Tensor`` map.  Every tensor draws its
    initial values from an RNG stream keyed by (seed, path), so two models
    built from the same seed share backbone parameters bit-exactly no matter
    which conditioning variant each one allocates on top.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        cfg = config

        self.embed_tokens = self._param("embed/tokens", (cfg.vocab, cfg.d))
        self.pos_enc = self._param("embed/pos_enc", (cfg.L_enc, cfg.d))
        self.pos_dec = self._param("embed/pos_dec", (cfg.L_dec, cfg.d))
        self.enc_blocks = [self._block("enc", i, cross=False) for i in range(cfg.M_enc)]
        self.dec_blocks = [self._block("dec", i, cross=True) for i in range(cfg.M_dec)]
        self.enc_final_gain = self._param("enc/final_norm", (cfg.d,), init="ones")
        self.dec_final_gain = self._param("dec/final_norm", (cfg.d,), init="ones")
        self.lm_head = self._param("lm_head", (cfg.d, cfg.vocab))

        self.conditioning: dict[str, StackConditioning] = {}
        if cfg.variant in HYPER_VARIANTS:
            for stack_name in cfg.placed_stacks():
                self.conditioning[stack_name] = StackConditioning(
                    cfg, stack_name, self._register)
        self.input_prompts: InputPromptTable | None = None
        if cfg.variant == "prompt_tuning":
            self.input_prompts = InputPromptTable(cfg, self._register)
        self.adapters: dict[str, AdapterStack] = {}
        if cfg.variant == "adapter":
            for stack_name in cfg.placed_stacks():
                self.adapters[stack_name] = AdapterStack(cfg, stack_name, self._register)

        self.record_attention = False
        self.attention_trace: list[dict] = []

    # -- parameter allocation ---------------------------------------------
    def _param(self, path: str, shape: tuple[int, ...], std: float = 0.02,
               init: str = "normal") -> Tensor:
        if path in self.params:
            raise ConfigError(f"duplicate parameter path {path!r}")
        if init == "ones":
            values = np.ones(shape)
        elif std == 0.0:
            values = np.zeros(shape)
        else:
            values = stream(self.seed, "param", path).normal(0.0, std, size=shape)
        tensor = Tensor(values, requires_grad=True, name=path)
        self.params[path] = tensor
        return tensor

    def _register(self, path: str, shape: tuple[int, ...], std: float) -> Tensor:
        return self._param(path, shape, std=std)

    def _block(self, stack: str, index: int, cross: bool) -> Block:
        cfg = self.config
        hd = cfg.h * cfg.d_h

        def attn_layer(kind: str) -> AttentionLayer:
            prefix = f"{stack}/{index}/{kind}"
            return AttentionLayer(
                W_q=self._param(f"{prefix}/wq", (cfg.d, hd)),
                W_k=self._param(f"{prefix}/wk", (cfg.d, hd)),
                W_v=self._param(f"{prefix}/wv", (cfg.d, hd)),
                W_o=self._param(f"{prefix}/wo", (hd, cfg.d)),
                h=cfg.h,
                d_h=cfg.d_h,
            )

        return Block(
            attn=attn_layer("attn"),
            attn_gain=self._param(f"{stack}/{index}/norm_attn", (cfg.d,), init="ones"),
            cross=attn_layer("cross") if cross else None,
            cross_gain=(self._param(f"{stack}/{index}/norm_cross", (cfg.d,), init="ones")
                        if cross else None),
            ffn_w1=self._param(f"{stack}/{index}/ffn/w1", (cfg.d, cfg.ffn_dim)),
            ffn_w2=self._param(f"{stack}/{index}/ffn/w2", (cfg.ffn_dim, cfg.d)),
            ffn_gain=self._param(f"{stack}/{index}/norm_ffn", (cfg.d,), init="ones"),
        )

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- conditioning lookup ------------------------------------------------
    def _stack_prompts(self, stack: str, task: int, layer: int) -> PromptPair | None:
        cond = self.conditioning.get(stack)
        if cond is None or cond.l == 0:
            return None
        return cond.prompt_pair(task, layer)

    # -- forward -------------------------------------------------------------
    def _embed(self, ids: np.ndarray, table: Tensor, pos_table: Tensor) -> Tensor:
        B, L = ids.shape
        if L > pos_table.shape[0]:
            raise ShapeError(
                f"sequence length {L} exceeds maximum {pos_table.shape[0]}")
        if ids.min() < 0 or ids.max() >= self.config.vocab:
            raise IndexError(f"token id out of range [0, {self.config.vocab})")
        positions = np.broadcast_to(np.arange(L), (B, L))
        return gather_axis0(table, ids) + gather_axis0(pos_table, positions)

    def _ffn(self, x: Tensor, block: Block) -> Tensor:
        return matmul(relu(matmul(x, block.ffn_w1)), block.ffn_w2)

    def encode(self, enc_ids: np.ndarray, enc_valid: np.ndarray,
               task: int) -> tuple[Tensor, np.ndarray]:
        """Encoder stack output and the matching memory key validity mask."""
        x = self._embed(enc_ids, self.embed_tokens, self.pos_enc)
        key_valid = enc_valid
        query_valid = enc_valid
        if self.input_prompts is not None and self.input_prompts.l > 0:
            x = prepend_input_prompts(self.input_prompts, x, task)
            B = enc_ids.shape[0]
            prompt_true = np.ones((B, self.input_prompts.l), dtype=bool)
            key_valid = np.concatenate([prompt_true, enc_valid], axis=1)
            # input prompt rows are not real tokens; keep them out of analysis
            query_valid = np.concatenate([~prompt_true, enc_valid], axis=1)
        for m, block in enumerate(self.enc_blocks):
            prompts = self._stack_prompts("enc", task, m)
            a = layer_norm(x, block.attn_gain)
            x = x + _attention(self, "enc", m, "self", a, a, block.attn,
                               prompts, False, key_valid, query_valid)
            x = x + self._ffn(layer_norm(x, block.ffn_gain), block)
            if "enc" in self.adapters:
                x = adapter_apply(self.adapters["enc"], x, task, m)
        return layer_norm(x, self.enc_final_gain), key_valid

    def decode(self, memory: Tensor, mem_valid: np.ndarray, dec_ids: np.ndarray,
               dec_valid: np.ndarray, task: int) -> Tensor:
        x = self._embed(dec_ids, self.embed_tokens, self.pos_dec)
        for m, block in enumerate(self.dec_blocks):
            prompts = self._stack_prompts("dec", task, m)
            a = layer_norm(x, block.attn_gain)
            x = x + _attention(self, "dec", m, "self", a, a, block.attn,
                               prompts, True, dec_valid, dec_valid)
            c = layer_norm(x, block.cross_gain)
            x = x + _attention(self, "dec", m, "cross", c, memory, block.cross,
                               None, False, mem_valid, dec_valid)
            x = x + self._ffn(layer_norm(x, block.ffn_gain), block)
            if "dec" in self.adapters:
                x = adapter_apply(self.adapters["dec"], x, task, m)
        return matmul(layer_norm(x, self.dec_final_gain), self.lm_head)

    def forward_batch(self, enc_ids: np.ndarray, enc_valid: np.ndarray,
                      dec_ids: np.ndarray, dec_valid: np.ndarray,
                      task: int) -> Tensor:
        """Logits (B, L_dec, vocab) for one task's padded batch."""
        if not 0 <= task < self.config.T:
            raise IndexError(f"task index {task} out of range [0, {self.config.T})")
        memory, mem_valid = self.encode(enc_ids, enc_valid, task)
        return self.decode(memory, mem_valid, dec_ids, dec_valid, task)

    def forward(self, enc_tokens, dec_tokens, task: int) -> Tensor:
        """Per-position logits (len(dec_tokens), vocab) for a single example."""
        enc = np.asarray([list(enc_tokens)], dtype=np.int64)
        dec = np.asarray([list(dec_tokens)], dtype=np.int64)
        logits = self.forward_batch(
            enc, np.ones_like(enc, dtype=bool), dec, np.ones_like(dec, dtype=bool), task)
        return reshape(logits, (dec.shape[1], self.config.vocab))


def greedy_decode(model: Model, enc_tokens, task: int, max_len: int) -> list[int]:
    """Greedy generation; argmax ties resolve to the lowest token id."""
    return greedy_decode_batch(model, [list(enc_tokens)], task, max_len)[0]


def greedy_decode_batch(model: Model, enc_token_lists: list[list[int]],
                        task: int, max_len: int) -> list[list[int]]:
    """Batched greedy decoding, re-running the full forward pass per step."""
    if max_len > model.config.L_dec:
        raise ConfigError(f"max_len {max_len} exceeds L_dec {model.config.L_dec}")
    B = len(enc_token_lists)
    width = max(len(t) for t in enc_token_lists)
    enc = np.full((B, width), PAD_ID, dtype=np.int64)
    enc_valid = np.zeros((B, width), dtype=bool)
    for i, tokens in enumerate(enc_token_lists):
        enc[i, :len(tokens)] = tokens
        enc_valid[i, :len(tokens)] = True

    outputs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    dec = np.full((B, 1), PAD_ID, dtype=np.int64)  # decoder start token
    with no_grad():
        for _ in range(max_len):
            dec_valid = np.ones_like(dec, dtype=bool)
            logits = model.forward_batch(enc, enc_valid, dec, dec_valid, task)
            step_tokens = logits.data[:, -1, :].argmax(axis=1)
            for i in range(B):
                if done[i]:
                    continue
                if step_tokens[i] == EOS_ID:
                    done[i] = True
                else:
                    outputs[i].append(int(step_tokens[i]))
            if done.all():
                break
            dec = np.concatenate([dec, step_tokens[:, None]], axis=1)
    return outputs


def is_conditioned_path(path: str) -> bool:
    """Task-conditioned parameters are classified by their path prefix."""
    return path.startswith("cond/") or path.startswith("baseline/")
