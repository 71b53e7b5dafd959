"""Differentiable A* planning toolkit.

Trainable guidance maps steer a matrix-form A* search whose every step is
differentiable; classical heap planners provide baselines and oracles.
"""

__version__ = "0.1.0"
