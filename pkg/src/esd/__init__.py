"""Enhanced separable disentanglement for unsupervised domain adaptation on feature vectors."""

__version__ = "0.1.0"
