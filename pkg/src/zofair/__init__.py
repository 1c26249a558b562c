"""Black-box individual fairness testing driven by zero-order gradients."""

__version__ = "0.1.0"
