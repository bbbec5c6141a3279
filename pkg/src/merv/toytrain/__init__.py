from .model import ToyLLMConfig, ToyPipeline, build_pipeline
from .tasks import VOCAB, SynthTask, make_synth_task
from .train import (
    RECIPES,
    RecipeConfig,
    evaluate,
    grad_check,
    load_checkpoint,
    run_specialization,
    save_checkpoint,
    train,
)

__all__ = [
    "RECIPES",
    "RecipeConfig",
    "SynthTask",
    "ToyLLMConfig",
    "ToyPipeline",
    "VOCAB",
    "build_pipeline",
    "evaluate",
    "grad_check",
    "load_checkpoint",
    "make_synth_task",
    "run_specialization",
    "save_checkpoint",
    "train",
]
