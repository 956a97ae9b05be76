"""Training, inference, evaluation and ablation around the detector."""
