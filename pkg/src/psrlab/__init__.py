"""Private, robust and scalable collaborative-training laboratory."""

__version__ = "0.1.0"
