"""Cooperative multi-agent DDPG for corridor traffic signal control."""

__version__ = "0.1.0"
