"""Inference-time hallucination correction on a toy transformer via hierarchical PPO.

A small decoder-only model is trained on a synthetic fact world with planted
corruptions. A two-level PPO agent learns where (neuron category) and how
(perturbation type and magnitude) to temporarily perturb feed-forward
activations so that the corrupted answers flip back to the gold ones.
"""

__version__ = "0.1.0"
