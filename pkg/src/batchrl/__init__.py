"""Batched proximal policy optimization over lock-step parallel environments."""

from batchrl.errors import ContractViolation

__version__ = "0.1.0"

__all__ = ["ContractViolation", "__version__"]
