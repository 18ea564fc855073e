"""Stable test-time adaptation of regression surrogates from D-optimal source statistics."""

__version__ = "0.1.0"
