"""Layout-grounded draft sampling with hybrid re-ranking and iterative refinement."""

__version__ = "0.1.0"
