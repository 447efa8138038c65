"""Food image to ingredients to instructions, on a small numpy network library."""

__version__ = "0.1.0"
