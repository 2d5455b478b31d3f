"""Desk-scale multi-task transformer lab with prompt-based task conditioning."""

from .config import ConfigError, ModelConfig
from .conditioning import (GlobalHyperNet, LocalHyperNet, PromptPair,
                           StackConditioning, TaskLayerEmbeddings,
                           generate_hyper_prompts, generate_local_hypernets,
                           layer_aware_embedding, prompts_for)
from .data import Example, TaskSpec, Tokenizer, generate_task, mixing_sampler
from .tensor import Tensor, ShapeError, no_grad
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .transformer import Model, greedy_decode, self_attention

__all__ = [
    "ConfigError", "ModelConfig", "GlobalHyperNet", "LocalHyperNet",
    "PromptPair", "StackConditioning", "TaskLayerEmbeddings",
    "generate_hyper_prompts", "generate_local_hypernets",
    "layer_aware_embedding", "prompts_for", "Example", "TaskSpec", "Tokenizer",
    "generate_task", "mixing_sampler", "Tensor", "ShapeError", "no_grad",
    "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint", "train",
    "Model", "greedy_decode", "self_attention",
]
