"""Tests for the mmtpsm library."""

from __future__ import annotations

from pathlib import Path


def load_fixture(filename: str) -> str:
    """Load a fixture."""
    path = Path(__package__) / "fixtures" / filename
    return path.read_text(encoding="utf-8")


def fixture_path(filename: str) -> Path:
    """Return the path of a fixture."""
    return Path(__package__) / "fixtures" / filename
