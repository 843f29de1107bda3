"""HTTP surface over the core package.

create_app() builds a FastAPI application exposing compression,
generation, multi-turn sessions, and the cost model. The command-line
client drives the same app in process by default.
"""

from .app import create_app

__all__ = ["create_app"]
