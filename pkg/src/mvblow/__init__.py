"""Loss-process solvers for the mean-field absorption problem with positive feedback."""

__version__ = "0.1.0"
