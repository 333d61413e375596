"""Desk-scale open-vocabulary segmentation pipeline over frozen-backbone features."""

__version__ = "0.1.0"
