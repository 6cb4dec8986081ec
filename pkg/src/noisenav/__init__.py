"""Reinforcement-learned navigation of the initial noise of a frozen diffusion action prior."""

__version__ = "0.1.0"
