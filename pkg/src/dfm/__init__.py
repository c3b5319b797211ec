"""Out-of-distribution detection from deep-network features.

Subspace models (PCA and RBF kernel PCA) capture where training features
live; class-conditional densities in the reduced space give log-likelihood
scores, and distances to the subspace give reconstruction-error scores.
"""

__version__ = "0.1.0"
