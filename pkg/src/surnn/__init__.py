"""Selective-update recurrent networks: exact-carry gating over RNN/GRU backbones."""

__version__ = "0.1.0"
