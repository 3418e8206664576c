"""Spatial-relation preference lab: forge pairs, train a Gaussian reward model,
fine-tune a flow-matching policy with top-k filtered GRPO."""

from ._backend import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
