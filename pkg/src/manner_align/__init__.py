"""Writing-manner alignment toolkit: rewrite/review corpus alignment,
perplexity gap measurement, and blind human style assessment."""

__version__ = "0.1.0"
