"""Core annotation logic."""
