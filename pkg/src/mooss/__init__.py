"""Masked temporal contrastive state-representation learning on a toy pixel POMDP."""

__version__ = "0.1.0"
