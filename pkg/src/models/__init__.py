"""Records and errors shared across pipeline stages."""
