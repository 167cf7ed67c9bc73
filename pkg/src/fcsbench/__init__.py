"""Scheduling-latency benchmark for a 250 Hz quadrotor attitude loop on Linux."""

__version__ = "0.1.0"
