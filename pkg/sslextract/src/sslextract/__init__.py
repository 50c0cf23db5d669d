"""Offline SSL feature extraction into CTXF teacher files."""
from __future__ import annotations

__version__ = "0.1.0"
