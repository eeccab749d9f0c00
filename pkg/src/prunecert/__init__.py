"""Certified robustness bounds for pruned stochastic policies under
adversarial state perturbations, with PPO training, pruning schedules,
observation attacks and an experiment harness."""

__version__ = "0.1.0"
