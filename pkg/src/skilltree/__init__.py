"""Skill-based hierarchical RL with soft decision tree policies and tree distillation."""
__version__ = "0.1.0"
