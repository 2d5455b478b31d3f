"""Task-conditioned prompt generation for self-attention.

Three variants produce an (l, h, d_h) key/value prompt pair per (task, layer):

* ``share``: one bottleneck projector per layer, shared by every task.
* ``sep``: one bottleneck projector per (task, layer), no sharing.
* ``global``: the per-layer projectors are themselves generated, from a
  layer-aware task embedding contracted against four weight tensors that are
  shared across all tasks and layers of a stack.

Prompt pairs are regenerated inside the training graph on every call so
gradients reach every upstream parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import ConfigError, HYPER_VARIANTS, ModelConfig
from .tensor import Tensor, concat, gather_axis0, matmul, relu, reshape, swap_axes


@dataclass
class PromptPair:
    """Key and value prompts for one (task, layer), both shaped (l, h, d_h)."""

    P_k: Tensor
    P_v: Tensor

    @property
    def length(self) -> int:
        return self.P_k.shape[0]


@dataclass
class LocalHyperNet:
    """Bottleneck projector mapping an (l, d) prompt to key/value prompts."""

    D_k: Tensor  # (d, b)
    U_k: Tensor  # (b, h*d_h)
    D_v: Tensor
    U_v: Tensor
    h: int
    d_h: int


@dataclass
class TaskLayerEmbeddings:
    """Task and layer embedding tables plus the fusing two-layer MLP.

    The MLP is bias-free so the enumerated parameter count matches the
    closed-form accounting exactly.
    """

    task_emb: Tensor   # (T, t')
    layer_emb: Tensor  # (M, t')
    proj_w1: Tensor    # (2t', e)
    proj_w2: Tensor    # (e, t)


@dataclass
class GlobalHyperNet:
    """Weights generating per-layer projectors from a fused task embedding."""

    W_Dk: Tensor  # (d*b, t)
    W_Uk: Tensor  # (b*h*d_h, t)
    W_Dv: Tensor
    W_Uv: Tensor
    d: int
    b: int
    h: int
    d_h: int


def layer_aware_embedding(emb: TaskLayerEmbeddings, task: int, layer: int) -> Tensor:
    """Fuse one task embedding with one layer embedding into a (1, t) row."""
    T = emb.task_emb.shape[0]
    M = emb.layer_emb.shape[0]
    if not 0 <= task < T:
        raise IndexError(f"task index {task} out of range [0, {T})")
    if not 0 <= layer < M:
        raise IndexError(f"layer index {layer} out of range [0, {M})")
    k_row = gather_axis0(emb.task_emb, [task])
    z_row = gather_axis0(emb.layer_emb, [layer])
    fused = concat([k_row, z_row], axis=1)
    return matmul(relu(matmul(fused, emb.proj_w1)), emb.proj_w2)


def generate_local_hypernets(ghn: GlobalHyperNet, fused: Tensor) -> LocalHyperNet:
    """Contract the fused embedding against the generator weights.

    ``fused`` is a (1, t) row; each output matrix is one weight tensor's
    column combination, reshaped to its projector layout.
    """
    d, b, hd = ghn.d, ghn.b, ghn.h * ghn.d_h

    def gen(weights: Tensor, rows: int, cols: int) -> Tensor:
        flat = matmul(fused, swap_axes(weights, 0, 1))  # (1, rows*cols)
        return reshape(flat, (rows, cols))

    return LocalHyperNet(
        D_k=gen(ghn.W_Dk, d, b),
        U_k=gen(ghn.W_Uk, b, hd),
        D_v=gen(ghn.W_Dv, d, b),
        U_v=gen(ghn.W_Uv, b, hd),
        h=ghn.h,
        d_h=ghn.d_h,
    )


def generate_hyper_prompts(local: LocalHyperNet, P_task: Tensor) -> PromptPair:
    """Project a task's (l, d) global prompt into an (l, h, d_h) pair."""
    l = P_task.shape[0]

    def proj(D: Tensor, U: Tensor) -> Tensor:
        return reshape(matmul(relu(matmul(P_task, D)), U), (l, local.h, local.d_h))

    return PromptPair(P_k=proj(local.D_k, local.U_k), P_v=proj(local.D_v, local.U_v))


class StackConditioning:
    """Conditioning parameters owned by one stack (encoder or decoder).

    ``register(path, shape, std)`` allocates a parameter tensor under the
    stack's ``cond/<stack>/`` prefix; the owning model keeps the flat
    parameter map for optimizers and checkpoints.
    """

    def __init__(self, cfg: ModelConfig, stack: str, register):
        if cfg.variant not in HYPER_VARIANTS:
            raise ConfigError(f"variant {cfg.variant!r} has no attention conditioning")
        self.variant = cfg.variant
        self.stack = stack
        self.l = cfg.stack_prompt_len(stack)
        self.T = cfg.T
        self.M = cfg.layers(stack)
        self.d = cfg.d
        self.h = cfg.h
        self.d_h = cfg.d_h
        hd = cfg.h * cfg.d_h
        prefix = f"cond/{stack}"

        self.prompts = register(f"{prefix}/prompts", (cfg.T, self.l, cfg.d), 0.02)

        if cfg.variant == "share":
            self.layer_nets = [
                self._local_net(register, f"{prefix}/layer{m}", cfg, hd)
                for m in range(self.M)
            ]
        elif cfg.variant == "sep":
            self.task_layer_nets = [
                [self._local_net(register, f"{prefix}/task{tau}/layer{m}", cfg, hd)
                 for m in range(self.M)]
                for tau in range(cfg.T)
            ]
        else:  # global
            self.embeddings = TaskLayerEmbeddings(
                task_emb=register(f"{prefix}/task_emb", (cfg.T, cfg.t_prime), 0.02),
                layer_emb=register(f"{prefix}/layer_emb", (self.M, cfg.t_prime), 0.02),
                proj_w1=register(f"{prefix}/proj_w1", (2 * cfg.t_prime, cfg.e), 0.02),
                proj_w2=register(f"{prefix}/proj_w2", (cfg.e, cfg.t), 0.02),
            )
            # Up-projection generators start small so generated prompts sit
            # near zero and cannot dominate attention rows at step 0.
            u_std = 0.02 / cfg.t ** 0.25
            self.ghn = GlobalHyperNet(
                W_Dk=register(f"{prefix}/w_dk", (cfg.d * cfg.b, cfg.t), 0.02),
                W_Uk=register(f"{prefix}/w_uk", (cfg.b * hd, cfg.t), u_std),
                W_Dv=register(f"{prefix}/w_dv", (cfg.d * cfg.b, cfg.t), 0.02),
                W_Uv=register(f"{prefix}/w_uv", (cfg.b * hd, cfg.t), u_std),
                d=cfg.d, b=cfg.b, h=cfg.h, d_h=cfg.d_h,
            )

    @staticmethod
    def _local_net(register, prefix: str, cfg: ModelConfig, hd: int) -> LocalHyperNet:
        return LocalHyperNet(
            D_k=register(f"{prefix}/d_k", (cfg.d, cfg.b), 0.02),
            U_k=register(f"{prefix}/u_k", (cfg.b, hd), 0.02),
            D_v=register(f"{prefix}/d_v", (cfg.d, cfg.b), 0.02),
            U_v=register(f"{prefix}/u_v", (cfg.b, hd), 0.02),
            h=cfg.h,
            d_h=cfg.d_h,
        )

    def task_prompt(self, task: int) -> Tensor:
        if not 0 <= task < self.T:
            raise IndexError(f"task index {task} out of range [0, {self.T})")
        return reshape(gather_axis0(self.prompts, [task]), (self.l, self.d))

    def prompt_pair(self, task: int, layer: int) -> PromptPair:
        """PromptPair for (task, layer), rebuilt in-graph on every call."""
        if not 0 <= layer < self.M:
            raise IndexError(f"layer index {layer} out of range [0, {self.M})")
        P_task = self.task_prompt(task)
        if self.variant == "share":
            local = self.layer_nets[layer]
        elif self.variant == "sep":
            local = self.task_layer_nets[task][layer]
        else:
            fused = layer_aware_embedding(self.embeddings, task, layer)
            local = generate_local_hypernets(self.ghn, fused)
        return generate_hyper_prompts(local, P_task)


def prompts_for(cond: StackConditioning, task: int, layer: int) -> PromptPair:
    """Variant dispatch for one stack's prompt pair."""
    if cond.variant not in HYPER_VARIANTS:
        raise ConfigError(f"prompts_for: unsupported variant {cond.variant!r}")
    return cond.prompt_pair(task, layer)
