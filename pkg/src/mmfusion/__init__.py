"""Multi-index fusion of sparse image indexes via t-SVD low-rank tensor optimization."""

__version__ = "0.1.0"
