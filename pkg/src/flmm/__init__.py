"""Functional linear mixed models for sparse and irregularly sampled curves."""

__version__ = "0.1.0"
