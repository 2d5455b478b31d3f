"""Closed-form and enumerated parameter counts plus forward-op estimates.

The closed form for the generated-projector variant is, per conditioned
stack, ``d*l*T + 4*b*d*t + T*t' + M*t' + (2t' + t)*e``; the shared and
per-task projector variants replace the last four terms with ``4*b*d*M`` and
``4*b*d*M*T`` respectively.  ``count_enumerated`` is the independent oracle:
it walks every allocated tensor and classifies by path prefix.

Forward-op estimates count multiply-accumulates only (2*m*k*n per dense
m,k by k,n product); softmax, normalization and other elementwise work is
ignored, which suits ordering comparisons but not absolute magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ConfigError, HYPER_VARIANTS, ModelConfig
from .transformer import Model, is_conditioned_path


@dataclass
class ParamReport:
    backbone_count: int
    conditioned_count: int
    ratio: float  # 1 + conditioned/backbone
    breakdown: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "backbone_count": self.backbone_count,
            "conditioned_count": self.conditioned_count,
            "ratio": self.ratio,
            "ratio_label": format_ratio(self.ratio),
            "breakdown": dict(sorted(self.breakdown.items())),
        }


@dataclass
class OpsReport:
    forward_ops: int
    breakdown: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"forward_ops": self.forward_ops, "breakdown": dict(self.breakdown)}


def format_ratio(ratio: float) -> str:
    return f"{round(ratio, 2):.2f}x"


def _stack_formula(cfg: ModelConfig, stack: str) -> int:
    """Added parameters for one stack under the current variant."""
    M = cfg.layers(stack)
    if cfg.variant == "adapter":
        return 2 * cfg.d * cfg.adapter_bottleneck * M * cfg.T
    l = cfg.stack_prompt_len(stack)
    prompt_terms = cfg.d * l * cfg.T
    if cfg.variant == "share":
        return prompt_terms + 4 * cfg.b * cfg.d * M
    if cfg.variant == "sep":
        return prompt_terms + 4 * cfg.b * cfg.d * M * cfg.T
    if cfg.variant == "global":
        return (prompt_terms
                + 4 * cfg.b * cfg.d * cfg.t
                + cfg.T * cfg.t_prime
                + M * cfg.t_prime
                + (2 * cfg.t_prime + cfg.t) * cfg.e)
    raise ConfigError(f"no per-stack formula for variant {cfg.variant!r}")


def count_formula(cfg: ModelConfig) -> int:
    """Closed-form count of task-conditioned parameters for any variant."""
    cfg.validate()
    if cfg.variant == "none":
        return 0
    if cfg.variant == "prompt_tuning":
        # one table prepended to the encoder input, independent of placement
        return cfg.d * cfg.input_prompt_len() * cfg.T
    return sum(_stack_formula(cfg, stack) for stack in cfg.placed_stacks())


def count_enumerated(model: Model) -> ParamReport:
    """Oracle count: walk every allocated tensor and sum element counts."""
    backbone = 0
    conditioned = 0
    breakdown: dict[str, int] = {}
    for path, tensor in model.parameters().items():
        n = tensor.size
        if is_conditioned_path(path):
            conditioned += n
            breakdown[path] = n
        else:
            backbone += n
    ratio = 1.0 + (conditioned / backbone if backbone else 0.0)
    return ParamReport(backbone_count=backbone, conditioned_count=conditioned,
                       ratio=ratio, breakdown=breakdown)


# ---------------------------------------------------------------------------
# forward-op estimates
# ---------------------------------------------------------------------------

def _matmul_ops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def _generation_ops(cfg: ModelConfig, l: int) -> int:
    """Prompt-generation products for one (task, layer); 0 when l == 0."""
    if l == 0:
        return 0
    prompt_proj = 2 * (_matmul_ops(l, cfg.d, cfg.b) + _matmul_ops(l, cfg.b, cfg.d))
    if cfg.variant in ("share", "sep"):
        return prompt_proj
    fuse = _matmul_ops(1, 2 * cfg.t_prime, cfg.e) + _matmul_ops(1, cfg.e, cfg.t)
    generators = 2 * (_matmul_ops(1, cfg.t, cfg.d * cfg.b)
                      + _matmul_ops(1, cfg.t, cfg.b * cfg.d))
    return fuse + generators + prompt_proj


def _attention_ops(cfg: ModelConfig, Lq: int, Lk: int, n_prompt: int) -> int:
    d = cfg.d
    qkv = 3 * _matmul_ops(Lq, d, d) if Lq == Lk else (
        _matmul_ops(Lq, d, d) + 2 * _matmul_ops(Lk, d, d))
    scores = _matmul_ops(Lq, cfg.d_h, n_prompt + Lk) * cfg.h
    values = _matmul_ops(Lq, n_prompt + Lk, cfg.d_h) * cfg.h
    out = _matmul_ops(Lq, d, d)
    return qkv + scores + values + out


def estimate_forward_ops(cfg: ModelConfig, L_enc: int, L_dec: int) -> OpsReport:
    """Multiply-accumulate count for one forward pass of a single example."""
    cfg.validate()
    d, ffn = cfg.d, cfg.ffn_dim
    Le = L_enc + cfg.input_prompt_len()  # input prompts lengthen the encoder
    Ld = L_dec
    breakdown: dict[str, int] = {"encoder": 0, "decoder": 0,
                                 "conditioning": 0, "lm_head": 0}

    l_enc = cfg.stack_prompt_len("enc")
    for _ in range(cfg.M_enc):
        ops = _attention_ops(cfg, Le, Le, l_enc)
        ops += 2 * _matmul_ops(Le, d, ffn)
        if cfg.variant == "adapter" and cfg.placed("enc"):
            ops += 2 * _matmul_ops(Le, d, cfg.adapter_bottleneck)
        breakdown["encoder"] += ops
        if cfg.variant in HYPER_VARIANTS and cfg.placed("enc"):
            breakdown["conditioning"] += _generation_ops(cfg, l_enc)

    l_dec = cfg.stack_prompt_len("dec")
    for _ in range(cfg.M_dec):
        ops = _attention_ops(cfg, Ld, Ld, l_dec)          # causal self-attention
        ops += _attention_ops(cfg, Ld, Le, 0)             # cross-attention
        ops += 2 * _matmul_ops(Ld, d, ffn)
        if cfg.variant == "adapter" and cfg.placed("dec"):
            ops += 2 * _matmul_ops(Ld, d, cfg.adapter_bottleneck)
        breakdown["decoder"] += ops
        if cfg.variant in HYPER_VARIANTS and cfg.placed("dec"):
            breakdown["conditioning"] += _generation_ops(cfg, l_dec)

    breakdown["lm_head"] = _matmul_ops(Ld, d, cfg.vocab)
    return OpsReport(forward_ops=sum(breakdown.values()), breakdown=breakdown)


def matched_adapter_bottleneck(cfg: ModelConfig) -> int:
    """Adapter bottleneck that parameter-matches the current variant's count.

    Solves 2*d*b_a*T*(sum of placed layer counts) ~= count_formula(cfg).
    """
    target = count_formula(cfg)
    layers = sum(cfg.layers(s) for s in cfg.placed_stacks())
    if layers == 0 or target == 0:
        return 1
    return max(1, round(target / (2 * cfg.d * cfg.T * layers)))
