"""Adversarial contrastive pretraining with cluster-guided perturbations."""

__version__ = "0.1.0"
