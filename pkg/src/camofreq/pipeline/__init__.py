"""Toy end-to-end model, synthetic data and training."""
from .config import ModelConfig, Toggles, scaled_k
from .model import (encode, filtered_features, forward, init_params, loss, plain_forward,
                    predict_instances, trainable_names)
from .synth import SynthSample, difference_image, synth_camo, synth_sample
from .train import (default_datasets, evaluate, fit, grid_settings, k_grid, run_ablation,
                    write_rows)

__all__ = [
    "ModelConfig", "Toggles", "scaled_k", "encode", "filtered_features", "forward", "init_params",
    "loss", "plain_forward", "predict_instances", "trainable_names", "SynthSample",
    "difference_image", "synth_camo", "synth_sample", "default_datasets", "evaluate", "fit",
    "grid_settings", "k_grid", "run_ablation", "write_rows",
]
