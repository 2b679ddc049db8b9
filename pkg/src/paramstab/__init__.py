"""Parametrix transition densities for diffusions and Euler-type chains,
with tools to measure how those densities react to coefficient perturbations."""

__version__ = "0.1.0"
