"""Offline RL laboratory built around conservative state-value estimation.

Two layers: an exact tabular layer (finite MDPs, the penalized value
operator, certification of its lower-bound and safe-improvement
guarantees) and a desk-scale neural layer (ensemble dynamics model,
conservative actor-critic, AWAC / CQL-AWR baselines) driven by a CLI.
"""

__version__ = "0.1.0"
