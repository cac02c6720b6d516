"""Instruction-style multi-task prompting for a small speech-like seq2seq model."""

from .decoding import DecodeConfig
from .evaluation import EvalReport, run_eval
from .model import ModelConfig, Seq2Seq, build_model, load_checkpoint
from .prompts import Instruction, ParaphrasePool, TaskSpecifier, compile_prompt, decode_option, load_pools
from .tasks import DatasetManifest, TaskDescriptor, synth_classification, synth_seqgen
from .train import TrainConfig, fit, lr_at
from .vocab import Vocabulary, build_vocabulary

__all__ = [
    "DatasetManifest",
    "DecodeConfig",
    "EvalReport",
    "Instruction",
    "ModelConfig",
    "ParaphrasePool",
    "Seq2Seq",
    "TaskDescriptor",
    "TaskSpecifier",
    "TrainConfig",
    "Vocabulary",
    "build_model",
    "build_vocabulary",
    "compile_prompt",
    "decode_option",
    "fit",
    "load_checkpoint",
    "load_pools",
    "lr_at",
    "run_eval",
    "synth_classification",
    "synth_seqgen",
]
