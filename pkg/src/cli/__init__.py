"""Command-line surface of the pipeline."""
