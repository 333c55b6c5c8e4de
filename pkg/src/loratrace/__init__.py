"""Detect LoRA fine-tuning lineage between transformer models, through
function-preserving weight obfuscation, and recover the adapter rank."""

from .config import RunConfig, load_run_config
from .experiment import build_models, run_trial
from .lora import LoraSpec, finetune, make_delta, product_delta_rank
from .model import ModelConfig, Model, LayerWeights, forward, forward_capture, generate_model
from .obfuscate import ObfuscationSpec, obfuscate_model, verify_equivalence
from .reconstruct import ReconstructionConfig, invert_mlp
from .tracer import TraceConfig, TraceReport, trace, weight_similarity_baseline
from .weights_io import load_model, save_model

__all__ = [
    "RunConfig", "load_run_config", "build_models", "run_trial",
    "LoraSpec", "finetune", "make_delta", "product_delta_rank",
    "ModelConfig", "Model", "LayerWeights", "forward", "forward_capture", "generate_model",
    "ObfuscationSpec", "obfuscate_model", "verify_equivalence",
    "ReconstructionConfig", "invert_mlp",
    "TraceConfig", "TraceReport", "trace", "weight_similarity_baseline",
    "load_model", "save_model",
]
