"""Stealth-constrained AC false-data-injection attack generation."""
