"""Tools for rearranging parallel shear flows in a 2-D ideal channel.

The package is organised around a pipeline:

* :mod:`shearflow.profiles` — piecewise-constant velocity profiles and the
  conservation-exact moves (refine / transpose / collide) on them.
* :mod:`shearflow.planning` — greedy search for move sequences connecting two
  profiles with equal momentum and energy.
* :mod:`shearflow.spectral` — pseudo-spectral solver for the forced Euler
  equations in a periodic channel with free-slip walls.
* :mod:`shearflow.control` — forcing schedules that steer one profile into
  another, with an L2 force-cost functional.
* :mod:`shearflow.flows` — discrete incompressible trajectory ensembles,
  action minimisation and braid invariants.
* :mod:`shearflow.cli` — command-line harness with reproducible artifacts.
"""

from shearflow.profiles import (
    Collide,
    Refine,
    StepProfile,
    Transpose,
    apply_move,
    discretize,
    energy,
    l2_distance,
    momentum,
    normalize,
)

__all__ = [
    "StepProfile",
    "Refine",
    "Transpose",
    "Collide",
    "apply_move",
    "discretize",
    "energy",
    "l2_distance",
    "momentum",
    "normalize",
]

__version__ = "0.1.0"
