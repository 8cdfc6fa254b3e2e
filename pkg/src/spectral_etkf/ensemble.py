"""Ensemble container helpers and the mean/perturbation factorization.

An ensemble is a ``(K, N)`` float array: one member per row. Perturbations
follow the same layout, so the usual N x K matrix X is ``perturbations.T``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DegenerateEnsembleError, NumericalOverflowError, ShapeError
from .models import ModelParams, _integrate


def as_ensemble(members, min_members=2):
    """Validate and return ``members`` as a ``(K, N)`` float array."""
    E = np.asarray(members, dtype=float)
    if E.ndim != 2:
        raise ShapeError(f"ensemble must be 2-D (members x components), got shape {E.shape}")
    if E.shape[0] < min_members:
        raise DegenerateEnsembleError(f"need at least {min_members} members, got {E.shape[0]}")
    if not np.all(np.isfinite(E)):
        raise DegenerateEnsembleError("ensemble contains non-finite values")
    return E


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray
    perturbations: np.ndarray  # (K, N), rows are (u_k - mean) / sqrt(K - 1)

    @property
    def size(self):
        return self.perturbations.shape[0]

    @cached_property
    def covariance(self):
        P = self.perturbations
        return P.T @ P


def decompose(ensemble):
    """Split an ensemble into its mean and 1/sqrt(K-1)-scaled perturbations."""
    E = as_ensemble(ensemble)
    K = E.shape[0]
    mean = E.mean(axis=0)
    return EnsembleStats(mean=mean, perturbations=(E - mean) / np.sqrt(K - 1))


def recompose(mean, perturbations):
    """Inverse of :func:`decompose`: member k = mean + sqrt(K-1) * perturbation k."""
    mean = np.asarray(mean, dtype=float)
    P = np.asarray(perturbations, dtype=float)
    if P.ndim != 2 or mean.ndim != 1 or P.shape[1] != mean.shape[0]:
        raise ShapeError(
            f"perturbations {P.shape} do not match a mean of shape {mean.shape}"
        )
    if P.shape[0] < 2:
        raise DegenerateEnsembleError("need at least 2 perturbation rows")
    return mean + np.sqrt(P.shape[0] - 1) * P


def propagate(ensemble, params: ModelParams, steps: int):
    """Advance every member ``steps`` RK4 steps.

    Members are integrated as one stacked array; rows never mix, so the
    result is bitwise identical to integrating each member on its own.
    Raises :class:`NumericalOverflowError` with ``members`` set to the
    indices that blew up.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    E = as_ensemble(ensemble)
    if E.shape[1] != params.N:
        raise ShapeError(f"ensemble dimension {E.shape[1]} != model dimension {params.N}")
    try:
        return _integrate(E, params, int(steps))
    except NumericalOverflowError as exc:
        raise NumericalOverflowError(
            f"member(s) {list(exc.members)} overflowed at RK4 step {exc.step}",
            step=exc.step,
            members=exc.members,
        ) from None


def spread(ensemble):
    """Ensemble spread: square root of the component-averaged sample variance."""
    E = np.asarray(ensemble, dtype=float)
    return float(np.sqrt(E.var(axis=0, ddof=1).mean()))


def write_ensemble_csv(path, ensemble):
    """Dump an ensemble as ``member,component,value`` triples."""
    E = np.asarray(ensemble, dtype=float)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["member", "component", "value"])
        for k, row in enumerate(E):
            for n, v in enumerate(row):
                writer.writerow([k, n, repr(float(v))])
