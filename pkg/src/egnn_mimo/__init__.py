"""Edge graph neural network MIMO detection with edge drop, plus classical baselines."""
__version__ = "0.1.0"
