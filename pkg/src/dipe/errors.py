"""Error type shared by every module.

Each failure carries a stable machine-readable ``code`` (``"dim_mismatch"``,
``"bad_grid"``, ...) so callers and the CLI can branch on it without parsing
messages.
"""

from __future__ import annotations


class DipeError(ValueError):
    """Raised on invalid input; ``code`` names the failure class."""

    def __init__(self, code: str, message: str, offset: int | None = None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.offset = offset
