"""tatrack: visual tracking with gradient-selected backbone features."""

__version__ = "0.1.0"
