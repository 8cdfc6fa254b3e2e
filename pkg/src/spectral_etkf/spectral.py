"""Fourier-domain spectrum smoothing of an ensemble.

Spectra are length-N float arrays indexed by DFT bin ``w = 0..N-1``. The
transform convention is the unnormalized forward DFT

    F[w] = sum_n u_n exp(-2 pi i n w / N)

with the 1/N factor on the inverse, which is numpy's default ``norm``.
Power spectra of real fields satisfy ``p[w] == p[N - w]``; the routines
below keep that symmetry exact, not merely to round-off, so the rescaling
factors are exactly symmetric and the rescaled members stay real.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ensemble import as_ensemble
from .errors import InvalidParameterError, NumericalFailureError, ShapeError

#: Relative threshold below which a perturbation power bin is treated as empty.
DEGENERATE_BIN_RTOL = 1e-14
#: Largest acceptable imaginary residue after the inverse DFT, relative to field scale.
IMAG_RESIDUE_RTOL = 1e-9


@dataclass(frozen=True)
class SmoothingKernel:
    """Symmetric, unit-sum weights on integer wavenumber offsets ``-R..R``."""

    sigma: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size % 2 == 0:
            raise InvalidParameterError("kernel weights must be a 1-D odd-length sequence")
        if np.any(w < 0) or not np.array_equal(w, w[::-1]):
            raise InvalidParameterError("kernel weights must be nonnegative and symmetric")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InvalidParameterError(f"kernel weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "weights", w)

    @property
    def radius(self):
        return self.weights.size // 2

    @property
    def is_identity(self):
        return self.radius == 0


def default_truncation_radius(sigma):
    return max(1, math.ceil(4.0 * sigma))


def gaussian_kernel(sigma: float, truncation_radius: int | None = None) -> SmoothingKernel:
    """Gaussian weights exp(-tau^2 / (2 sigma^2)) for |tau| <= radius, unit sum.

    ``sigma == 0`` gives the delta kernel (smoothing disabled). The default
    radius is ``max(1, ceil(4 sigma))``.
    """
    if not sigma >= 0:
        raise InvalidParameterError(f"kernel width must be >= 0, got {sigma}")
    if sigma == 0:
        return SmoothingKernel(0.0, np.ones(1))
    if truncation_radius is None:
        truncation_radius = default_truncation_radius(sigma)
    if truncation_radius < 0:
        raise InvalidParameterError("truncation radius must be >= 0")
    tau = np.arange(-truncation_radius, truncation_radius + 1, dtype=float)
    w = np.exp(-(tau**2) / (2.0 * sigma**2))
    return SmoothingKernel(float(sigma), w / w.sum())


def forward_transform(state, norm="backward"):
    """Forward DFT along the last axis (unnormalized by default)."""
    return np.fft.fft(np.asarray(state, dtype=float), axis=-1, norm=norm)


def inverse_transform(coeffs, norm="backward"):
    """Inverse DFT along the last axis; carries the 1/N factor by default."""
    return np.fft.ifft(coeffs, axis=-1, norm=norm)


def _mirror_index(N):
    return (-np.arange(N)) % N


def _symmetrize(power):
    # a + b == b + a in IEEE arithmetic, so the result is exactly symmetric.
    return 0.5 * (power + power[..., _mirror_index(power.shape[-1])])


def _power(coeffs):
    return _symmetrize(coeffs.real**2 + coeffs.imag**2)


def mean_power_spectrum(ensemble, norm="backward"):
    """Average over members of |F(u_k)[w]|^2."""
    E = as_ensemble(ensemble, min_members=1)
    return _power(forward_transform(E, norm)).mean(axis=0)


def smooth_spectrum(spectrum, kernel: SmoothingKernel):
    """Circular convolution of a spectrum with ``kernel`` over bins mod N."""
    p = np.asarray(spectrum, dtype=float)
    N = p.shape[-1]
    if kernel.weights.size > N:
        raise InvalidParameterError(
            f"kernel support {kernel.weights.size} exceeds the {N} available bins"
        )
    R = kernel.radius
    w = kernel.weights
    out = w[R] * p
    # Pairing the +tau and -tau terms keeps symmetric inputs exactly symmetric.
    for tau in range(1, R + 1):
        out = out + w[R + tau] * (np.roll(p, tau, axis=-1) + np.roll(p, -tau, axis=-1))
    return out


def clamped_smooth(ensemble_spectrum, mean_field_spectrum, kernel: SmoothingKernel):
    """Smoothed spectrum floored at the mean-field spectrum, bin by bin."""
    p = np.asarray(ensemble_spectrum, dtype=float)
    floor = np.asarray(mean_field_spectrum, dtype=float)
    if p.shape != floor.shape:
        raise ShapeError(f"spectrum shapes differ: {p.shape} vs {floor.shape}")
    return np.maximum(smooth_spectrum(p, kernel), floor)


@dataclass(frozen=True)
class _Decomposition:
    mean_coeffs: np.ndarray  # F(m), shape (N,)
    pert_coeffs: np.ndarray  # F(u_k - m), shape (K, N)
    total: np.ndarray  # (1/K) sum_k |F(u_k)|^2
    mean_field: np.ndarray  # |F(m)|^2
    perturbation: np.ndarray  # (1/K) sum_k |F(u_k - m)|^2

    def degenerate(self, values):
        scale = self.total.max()
        return values <= DEGENERATE_BIN_RTOL * scale


def _decompose_spectrum(E, norm):
    mean = E.mean(axis=0)
    Fm = forward_transform(mean, norm)
    Fx = forward_transform(E - mean, norm)
    Fu = Fm + Fx  # linearity; saves a transform
    return _Decomposition(
        mean_coeffs=Fm,
        pert_coeffs=Fx,
        total=_power(Fu).mean(axis=0),
        mean_field=_power(Fm),
        perturbation=_power(Fx).mean(axis=0),
    )


def _perturbation_alpha(d: _Decomposition, kernel):
    target = clamped_smooth(d.total, d.mean_field, kernel)
    bad = d.degenerate(d.perturbation)
    den = np.where(bad, 1.0, d.perturbation)
    alpha = np.sqrt((target - d.mean_field) / den)
    alpha[bad] = 1.0
    return alpha


def rescaling_factors(ensemble, kernel: SmoothingKernel, norm="backward"):
    """Per-wavenumber factors that give the perturbations the smoothed spectrum.

    alpha[w]^2 = (S(P)[w] - |F(m)[w]|^2) / ((1/K) sum_k |F(x_k)[w]|^2)

    where P is the ensemble mean power spectrum, S the clamped smoothing and
    x_k = u_k - m. Bins whose perturbation power is negligible (relative to
    the largest bin of P) get alpha = 1.
    """
    E = as_ensemble(ensemble)
    return _perturbation_alpha(_decompose_spectrum(E, norm), kernel)


def whole_ensemble_factors(ensemble, kernel: SmoothingKernel, norm="backward"):
    """Factors alpha~[w] = sqrt(S(P)[w] / P[w]) that rescale whole members."""
    E = as_ensemble(ensemble)
    d = _decompose_spectrum(E, norm)
    target = clamped_smooth(d.total, d.mean_field, kernel)
    bad = d.degenerate(d.total)
    alpha = np.sqrt(target / np.where(bad, 1.0, d.total))
    alpha[bad] = 1.0
    return alpha


def _back_to_real(coeffs, reference):
    fields = inverse_transform(coeffs)
    scale = max(float(np.abs(reference).max()), np.finfo(float).tiny)
    residue = float(np.abs(fields.imag).max())
    if residue > IMAG_RESIDUE_RTOL * scale:
        raise NumericalFailureError(
            f"inverse transform left an imaginary residue of {residue:.3e} (field scale {scale:.3e})"
        )
    return np.ascontiguousarray(fields.real)


def apply_spectrum_smoothing(ensemble, kernel: SmoothingKernel):
    """Rescale each member's perturbation in Fourier space; the mean is kept.

    Member k becomes F^-1( F(m) + alpha * F(u_k - m) ), so the ensemble mean
    power spectrum equals the clamped smoothed spectrum of the input.
    """
    E = as_ensemble(ensemble)
    if kernel.is_identity:
        return E.copy()
    d = _decompose_spectrum(E, "backward")
    alpha = _perturbation_alpha(d, kernel)
    return _back_to_real(d.mean_coeffs + alpha * d.pert_coeffs, E)


def apply_whole_ensemble_rescaling(ensemble, kernel: SmoothingKernel):
    """Rescale whole members in Fourier space by alpha~; this moves the mean."""
    E = as_ensemble(ensemble)
    if kernel.is_identity:
        return E.copy()
    alpha = whole_ensemble_factors(E, kernel)
    return _back_to_real(alpha * forward_transform(E), E)


def half_spectrum(power):
    """Bins 0..N//2 of a symmetric spectrum."""
    power = np.asarray(power, dtype=float)
    return power[..., : power.shape[-1] // 2 + 1]


def spectrum_roughness(power):
    """Total variation of the half spectrum, sum_w |p[w+1] - p[w]|."""
    return float(np.abs(np.diff(half_spectrum(power))).sum())


def write_spectrum_csv(path, power):
    """Dump the half spectrum as ``wavenumber,power``."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wavenumber", "power"])
        for w, v in enumerate(half_spectrum(power)):
            writer.writerow([w, repr(float(v))])
