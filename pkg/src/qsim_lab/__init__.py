"""Value-decomposition Q-learning with similarity-weighted TD targets."""

__version__ = "0.1.0"
