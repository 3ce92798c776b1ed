"""Toolkit for learning asymptotically stable, multistable dynamics from
short-horizon trajectories and controlling them through the learned
equilibrium map."""

__version__ = "0.1.0"
