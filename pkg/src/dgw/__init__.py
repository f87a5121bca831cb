"""Two-branch debiasing workspace on a from-scratch fp64 autograd."""

__version__ = "0.1.0"
