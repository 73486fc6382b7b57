"""HTTP service wrapping the core estimators."""

from .app import create_app

__all__ = ["create_app"]
