"""Imitation-learning workbench for discrete-time acceleration-driven
planar arms: behavior-cloning baselines, collocation-style joint training
of a policy and an anchored auxiliary-trajectory network, a scripted
expert demonstrator, and rollout diagnostics that audit the error-growth
bounds empirically."""

__version__ = "0.1.0"
