"""HTTP service exposing a live descriptor database."""

from .app import create_app

__all__ = ["create_app"]
