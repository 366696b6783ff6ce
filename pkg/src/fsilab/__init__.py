"""Desk-scale two-way fluid-solid interaction lab.

Learned surrogate (deformable latent grids + partitioned coupling updates)
plus a classical partitioned-coupling piston solver that generates
verifiable ground-truth trajectories, with training, evaluation, and data
tooling.
"""

__version__ = "0.1.0"
