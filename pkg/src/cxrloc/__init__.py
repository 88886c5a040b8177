"""Location-aware chest phantom classification: report parsing, text-to-box
regression, and attention-guided training."""

__version__ = "0.1.0"
