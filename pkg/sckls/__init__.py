"""
sckls - Shape-constrained kernel-weighted least squares
"""

__version__ = "0.1.0"
