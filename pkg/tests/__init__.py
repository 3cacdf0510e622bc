"""Tests for Video Box Annotator."""
