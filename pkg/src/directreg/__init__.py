"""Direct pairwise rigid registration with learned pose-aware local features."""

__version__ = "0.1.0"
