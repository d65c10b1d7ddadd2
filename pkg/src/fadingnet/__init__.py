"""Fading-memory block networks for one-step-ahead system identification."""

from .autodiff import Tape, Tensor

__all__ = ["Tape", "Tensor"]
