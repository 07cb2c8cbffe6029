"""Desk-scale tropical-cyclone forecasting with a structure-aware masked autoencoder."""

__version__ = "0.1.0"
