"""Deterministic artifact writers."""
