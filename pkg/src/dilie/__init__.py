"""Per-image content and style feature enhancement with generator priors."""

__version__ = "0.1.0"
