"""Desk-scale accent-adaptive continual self-supervision for speech.

A HuBERT-style masked-prediction encoder with per-block residual adapters,
trained in three stages (generic SSL, accent-adaptive SSL, CTC fine-tuning)
on deterministic synthetic speech, plus decoding and WER/WERR evaluation.
"""

__version__ = "0.1.0"
