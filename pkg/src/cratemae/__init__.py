"""White-box masked autoencoder: rate reduction, MSSA/ISTA layers, training and theory checks."""

__version__ = "0.1.0"
