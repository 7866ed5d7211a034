"""Clustering accelerometer force maps with bilinear factor mixtures.

Modules: :mod:`ingest` (epoch files), :mod:`forcemap` (KDE force maps),
:mod:`matvar` (matrix-variate normal), :mod:`mbi` (mixture fitting and
model search), :mod:`survival` (KM, log-rank, Cox) and :mod:`pipeline`
(end-to-end runs and synthetic cohorts).
"""
from .errors import AccelmixError

__version__ = "0.1.0"
__all__ = ["AccelmixError", "__version__"]
