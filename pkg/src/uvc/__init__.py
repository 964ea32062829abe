"""Desk-scale block-based hybrid video codec."""

from uvc.kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
