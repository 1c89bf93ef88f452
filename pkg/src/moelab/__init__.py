"""Desk-scale lab for distilling mixture-of-experts language models into dense students."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad  # noqa: F401
