"""Forecasting sparse, irregular multivariate sensor series with a triplet
transformer (SERT) and an interpretable linear-readout variant (SST-ANN)."""

from __future__ import annotations

__version__ = "0.1.0"
