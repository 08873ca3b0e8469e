"""Targeted universal audio perturbations against a speaker-verification pipeline."""

__version__ = "0.1.0"
