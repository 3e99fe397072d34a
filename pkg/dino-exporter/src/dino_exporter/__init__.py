"""Offline feature faucet: frozen ViT-S/8 patch features to portable files."""

from __future__ import annotations

__version__ = "0.1.0"


class ExporterError(RuntimeError):
    """A job cannot start (bad config, unreadable weights, empty dataset)."""
