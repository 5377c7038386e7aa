"""Simulation and analytic bounds for size- and state-aware dispatching to FCFS queues."""

__version__ = "0.1.0"
