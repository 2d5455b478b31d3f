"""Model architecture configuration and validation."""

from __future__ import annotations

from dataclasses import dataclass, fields, asdict


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


VARIANTS = ("none", "prompt_tuning", "adapter", "share", "sep", "global")
PLACEMENTS = ("encoder", "decoder", "both")
HYPER_VARIANTS = ("share", "sep", "global")


@dataclass
class ModelConfig:
    """All architecture hyperparameters.

    ``l`` is the prompt length used by every conditioned stack unless the
    per-stack overrides ``l_enc`` / ``l_dec`` are set (the prompt-length
    sweep tunes decoder and encoder lengths independently).
    """

    d: int = 64               # model dimension
    h: int = 4                # attention heads
    d_h: int = 16             # per-head dimension (d == h * d_h)
    M_enc: int = 2            # encoder layers
    M_dec: int = 2            # decoder layers
    ffn_dim: int = 256        # feed-forward hidden size
    vocab: int = 41           # vocabulary size
    L_enc: int = 24           # max encoder sequence length
    L_dec: int = 20           # max decoder sequence length
    l: int = 8                # prompt length
    l_enc: int | None = None  # per-stack override, default l
    l_dec: int | None = None
    b: int = 16               # hypernetwork bottleneck dimension
    t_prime: int = 16         # raw task/layer embedding dimension
    t: int = 32               # fused task embedding dimension
    e: int = 32               # task-projection hidden size
    T: int = 5                # task count
    adapter_bottleneck: int = 16  # adapter variant bottleneck b_a
    variant: str = "none"
    placement: str = "both"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.d != self.h * self.d_h:
            raise ConfigError(f"d ({self.d}) must equal h*d_h ({self.h}*{self.d_h})")
        if self.b > self.d:
            raise ConfigError(f"bottleneck b ({self.b}) must not exceed d ({self.d})")
        positive = ("d", "h", "d_h", "M_enc", "M_dec", "ffn_dim", "vocab",
                    "L_enc", "L_dec", "b", "t_prime", "t", "e", "T",
                    "adapter_bottleneck")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("l", "l_enc", "l_dec"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")

    # -- placement helpers -------------------------------------------------
    def placed(self, stack: str) -> bool:
        if stack == "enc":
            return self.placement in ("encoder", "both")
        if stack == "dec":
            return self.placement in ("decoder", "both")
        raise ConfigError(f"unknown stack {stack!r}")

    def placed_stacks(self) -> list[str]:
        return [s for s in ("enc", "dec") if self.placed(s)]

    def layers(self, stack: str) -> int:
        return self.M_enc if stack == "enc" else self.M_dec

    def stack_prompt_len(self, stack: str) -> int:
        """Effective attention-prompt length for one stack (0 if unplaced)."""
        if self.variant not in HYPER_VARIANTS or not self.placed(stack):
            return 0
        override = self.l_enc if stack == "enc" else self.l_dec
        return self.l if override is None else override

    def input_prompt_len(self) -> int:
        """Prompt length for the prompt_tuning baseline (encoder input only)."""
        if self.variant != "prompt_tuning":
            return 0
        return self.l if self.l_enc is None else self.l_enc

    # -- (de)serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg
