"""Bridges pretrained vision transformers into the score-record pipeline."""

__version__ = "0.1.0"
