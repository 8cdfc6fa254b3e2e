"""Ensemble transform Kalman filter with spectrum-smoothing sampling-error mitigation.

Lorenz 96 twin-experiment tooling lives in :mod:`spectral_etkf.experiments`;
the filter itself in :mod:`spectral_etkf.filter` and :mod:`spectral_etkf.spectral`.
"""

__version__ = "0.1.0"
