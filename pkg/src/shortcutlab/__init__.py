"""Shortcut-mechanism workbench: a tiny bias-free transformer, an actor-shortcut corpus,
path patching, head-based token attribution and its baselines."""

__version__ = "0.1.0"
