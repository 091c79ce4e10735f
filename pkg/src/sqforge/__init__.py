"""Moment-matched hard instances for list-decodable linear regression."""

__version__ = "0.1.0"
