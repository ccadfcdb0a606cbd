"""Gamma process stick-breaking, truncation bounds, and variational and
Monte Carlo inference for the infinite Gamma-Poisson factor model."""

from .crm import GammaProcessDraw, GammaProcessParams, draw_stick
from .model import Corpus, FactorCounts, FactorLoadings, Hyperpriors
from .numeric import SeededRng

__all__ = [
    "Corpus", "FactorCounts", "FactorLoadings", "GammaProcessDraw",
    "GammaProcessParams", "Hyperpriors", "SeededRng", "draw_stick",
]
__version__ = "0.1.0"
