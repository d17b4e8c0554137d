"""Distributed sum-preserving resource allocation over multi-agent networks."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
