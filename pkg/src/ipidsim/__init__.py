"""Discrete-event simulation of off-path TCP hijacking through shared IPID counters."""

__version__ = "0.1.0"
