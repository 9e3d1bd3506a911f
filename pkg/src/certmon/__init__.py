"""Toolkit for training, runtime-monitoring and repairing neural control
policies together with barrier/Lyapunov certificate networks on black-box
simulated dynamical systems."""

__version__ = "0.1.0"
