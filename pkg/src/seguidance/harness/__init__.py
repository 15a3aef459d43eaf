"""Dataset synthesis, training, evaluation and ablation orchestration."""
