"""General control functions for instrumental-variable effect estimation."""

__version__ = "0.1.0"
