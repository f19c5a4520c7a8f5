"""Main entry point for the dla-guard package."""

from __future__ import annotations

import sys

from dla_guard.cli import main

if __name__ == "__main__":
    sys.exit(main())
