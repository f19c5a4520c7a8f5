"""Version information for the dla-guard package."""

from __future__ import annotations

from importlib.metadata import version

__version__ = version("dla-guard")
