"""Surrogate evaluation, sweeps and the end-to-end pipeline."""
