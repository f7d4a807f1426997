"""Generative statistical downscaling on synthetic multiscale ensembles."""

__version__ = "0.1.0"
