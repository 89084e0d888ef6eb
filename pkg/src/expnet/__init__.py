"""ExpNet: focal/context decoupling classifier with neural firing fields, on numpy."""

__version__ = "0.1.0"
