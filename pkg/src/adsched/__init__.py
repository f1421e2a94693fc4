"""Opportunistic ad scheduling as a multiple-stopping POMDP."""

__version__ = "0.1.0"
