"""Streaming semantic surfel mapping with Bayesian label fusion and a dense CRF."""

__version__ = "0.1.0"
