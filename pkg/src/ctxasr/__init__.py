"""Desk-scale contextual ASR: encoder/adapter/decoder stack with staged
fine-tuning, hotword/summary prompting, and an evaluation suite."""

__version__ = "0.1.0"
