"""ETKF analysis with inflation, Gaspari-Cohn localization and spectrum smoothing."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh

from .ensemble import as_ensemble, decompose, recompose
from .errors import (
    InvalidParameterError,
    NumericalFailureError,
    ShapeError,
    SymmetryViolationError,
)
from .spectral import apply_spectrum_smoothing, apply_whole_ensemble_rescaling, gaussian_kernel

MODES = ("off", "perturbation", "whole-ensemble")
CONDITION_WARN = 1e12
NEGATIVE_EIG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ObservationSetup:
    """Direct observations of a subset of grid points with independent noise.

    ``noise_std`` may be a scalar or one value per observed component. Zero
    noise is allowed for generating perfect observations, but the analysis
    step rejects it.
    """

    dimension: int
    observed_indices: np.ndarray
    noise_std: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.observed_indices, dtype=np.intp).ravel()
        if idx.size < 1 or idx.size > self.dimension:
            raise InvalidParameterError(f"need 1..{self.dimension} observed indices, got {idx.size}")
        if np.any(np.diff(idx) <= 0):
            raise InvalidParameterError("observed indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.dimension:
            raise InvalidParameterError("observed index out of range")
        std = np.broadcast_to(np.asarray(self.noise_std, dtype=float), idx.shape).copy()
        if not np.all(std >= 0):
            raise InvalidParameterError("observation noise std must be nonnegative")
        object.__setattr__(self, "observed_indices", idx)
        object.__setattr__(self, "noise_std", std)

    @classmethod
    def every(cls, dimension, stride, noise_std):
        """Observe indices 0, stride, 2*stride, ..."""
        if stride < 1:
            raise InvalidParameterError("stride must be >= 1")
        return cls(dimension, np.arange(0, dimension, stride), noise_std)

    @property
    def size(self):
        return self.observed_indices.size

    @property
    def noise_variance(self):
        return self.noise_std**2

    @property
    def covariance(self):
        return np.diag(self.noise_variance)

    @property
    def operator(self):
        """Dense M x N selection matrix H."""
        H = np.zeros((self.size, self.dimension))
        H[np.arange(self.size), self.observed_indices] = 1.0
        return H

    def observe(self, state):
        return np.asarray(state)[..., self.observed_indices]


@dataclass(frozen=True)
class FilterConfig:
    """Tuning knobs of one assimilation cycle.

    ``c = inf`` disables localization; ``sigma = 0`` disables smoothing in
    either smoothing mode. ``additive`` is added to the prior covariance
    diagonal before the gain is formed.
    """

    rho: float = 1.0
    c: float = math.inf
    sigma: float = 0.0
    mode: str = "perturbation"
    additive: float = 0.0
    kernel: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.rho >= 1:
            raise InvalidParameterError(f"inflation rho must be >= 1, got {self.rho}")
        if not self.c > 0:
            raise InvalidParameterError(f"localization halfwidth must be > 0, got {self.c}")
        if self.mode not in MODES:
            raise InvalidParameterError(f"smoothing mode must be one of {MODES}, got {self.mode!r}")
        if not self.additive >= 0:
            raise InvalidParameterError("additive inflation must be >= 0")
        object.__setattr__(self, "kernel", gaussian_kernel(self.sigma))


def gaspari_cohn(distance, c):
    """Gaspari-Cohn fifth-order taper with halfwidth ``c`` (support radius 2c)."""
    if not c > 0:
        raise InvalidParameterError(f"halfwidth must be > 0, got {c}")
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise InvalidParameterError("distance must be nonnegative")
    z = d / c
    out = np.zeros_like(z)
    inner = z <= 1
    zi = z[inner]
    out[inner] = (((-0.25 * zi + 0.5) * zi + 0.625) * zi - 5.0 / 3.0) * zi**2 + 1.0
    outer = (z > 1) & (z < 2)
    zo = z[outer]
    out[outer] = (
        ((((zo / 12.0 - 0.5) * zo + 0.625) * zo + 5.0 / 3.0) * zo - 5.0) * zo
        + 4.0
        - 2.0 / (3.0 * zo)
    )
    return out if out.ndim else float(out)


def periodic_distance(N):
    i = np.arange(N)
    d = np.abs(i[:, None] - i[None, :])
    return np.minimum(d, N - d)


@lru_cache(maxsize=64)
def _cached_localization(N, c):
    L = gaspari_cohn(periodic_distance(N), c)
    L.setflags(write=False)
    return L


def localization_matrix(N: int, c: float):
    """L_ij = GC(d(i, j), c) with periodic grid distance d. Read-only array."""
    if N < 1:
        raise InvalidParameterError("N must be >= 1")
    if not c > 0:
        raise InvalidParameterError(f"halfwidth must be > 0, got {c}")
    if math.isinf(c):
        L = np.ones((N, N))
        L.setflags(write=False)
        return L
    return _cached_localization(int(N), float(c))


def inflate(ensemble, rho):
    """Multiplicative inflation: member -> mean + sqrt(rho) (member - mean)."""
    if not rho >= 1:
        raise InvalidParameterError(f"inflation rho must be >= 1, got {rho}")
    E = as_ensemble(ensemble)
    if rho == 1:
        return E.copy()
    mean = E.mean(axis=0)
    return mean + np.sqrt(rho) * (E - mean)


def symmetric_sqrt(T):
    """Symmetric square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues in [-1e-10, 0) are treated as round-off and clipped to zero.
    """
    T = 0.5 * (T + T.T)
    w, V = eigh(T)
    if w.min() < -NEGATIVE_EIG_TOL:
        raise SymmetryViolationError(
            f"transform matrix has eigenvalue {w.min():.3e}; expected positive semidefinite"
        )
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _factor_spd(S):
    try:
        factor = cho_factor(S, lower=True, check_finite=False)
    except LinAlgError:
        cond = np.linalg.cond(S)
        raise NumericalFailureError(
            f"innovation covariance is not positive definite (condition ~ {cond:.3e})",
            condition=cond,
        ) from None
    diag = np.abs(np.diag(factor[0]))
    cond_est = (diag.max() / diag.min()) ** 2
    if not np.isfinite(cond_est):
        raise NumericalFailureError("singular innovation covariance", condition=cond_est)
    if cond_est > CONDITION_WARN:
        warnings.warn(f"ill-conditioned innovation covariance (condition >= {cond_est:.3e})")
    return factor


def _transform(obs_perturbations, noise_variance):
    Y = np.asarray(obs_perturbations, dtype=float)
    A = np.eye(Y.shape[0]) + (Y / noise_variance) @ Y.T
    w, V = eigh(0.5 * (A + A.T))
    if not w.min() > 0:
        raise NumericalFailureError(
            f"I + (HX)^T Gamma^-1 (HX) is singular (smallest eigenvalue {w.min():.3e})",
            condition=float(w.max() / w.min()) if w.min() != 0 else math.inf,
        )
    # T and its symmetric root share A's eigenvectors: T = V diag(1/w) V^T.
    return (V / w) @ V.T, (V / np.sqrt(w)) @ V.T


def transform_matrix(obs_perturbations, noise_variance):
    """T = [I + (H X)^T Gamma^-1 (H X)]^-1.

    ``obs_perturbations`` is (H X)^T, i.e. shape (K, M).
    """
    return _transform(obs_perturbations, noise_variance)[0]


@dataclass(frozen=True)
class Analysis:
    mean: np.ndarray
    perturbations: np.ndarray
    transform: np.ndarray
    transform_sqrt: np.ndarray
    cross_covariance: np.ndarray  # (localized) C H^T, N x M
    innovation_factor: tuple  # Cholesky factor of H C H^T + Gamma

    @property
    def ensemble(self):
        return recompose(self.mean, self.perturbations)

    @property
    def gain(self):
        """Kalman gain C H^T (H C H^T + Gamma)^-1; only formed on request."""
        return cho_solve(self.innovation_factor, self.cross_covariance.T, check_finite=False).T


def etkf_analysis(prior, obs, setup: ObservationSetup, L=None, additive=0.0) -> Analysis:
    """One ETKF analysis returning the intermediate quantities.

    The gain uses the localized prior covariance ``L * C`` (``L=None`` means
    no localization) while the transform T is built from the unlocalized
    observed perturbations.
    """
    stats = decompose(prior)
    m, P = stats.mean, stats.perturbations
    N = m.size
    if setup.dimension != N:
        raise ShapeError(f"observation setup is for N={setup.dimension}, ensemble has N={N}")
    y = np.asarray(obs, dtype=float).ravel()
    if y.size != setup.size:
        raise ShapeError(f"expected {setup.size} observations, got {y.size}")
    idx, var = setup.observed_indices, setup.noise_variance
    if not np.all(var > 0):
        raise InvalidParameterError("the analysis needs strictly positive observation noise")
    PH = P[:, idx]

    if L is None and additive == 0:
        CH = P.T @ PH
        S = PH.T @ PH
    else:
        C = stats.covariance
        if additive:
            C = C + additive * np.eye(N)
        if L is not None:
            L = np.asarray(L, dtype=float)
            if L.shape != (N, N):
                raise ShapeError(f"localization matrix has shape {L.shape}, expected {(N, N)}")
            C = L * C
        CH = C[:, idx]
        S = C[np.ix_(idx, idx)]
    S = S + np.diag(var)
    factor = _factor_spd(S)
    mean = m + CH @ cho_solve(factor, y - m[idx], check_finite=False)

    T, R = _transform(PH, var)
    return Analysis(
        mean=mean,
        perturbations=R @ P,
        transform=T,
        transform_sqrt=R,
        cross_covariance=CH,
        innovation_factor=factor,
    )


def etkf_assimilate(prior, obs, setup: ObservationSetup, L=None, additive=0.0):
    """Posterior ensemble of one ETKF analysis (see :func:`etkf_analysis`)."""
    return etkf_analysis(prior, obs, setup, L, additive).ensemble


def smooth_prior(ensemble, config: FilterConfig):
    """Spectrum smoothing step selected by ``config.mode``."""
    if config.mode == "off" or config.kernel.is_identity:
        return as_ensemble(ensemble)
    if config.mode == "perturbation":
        return apply_spectrum_smoothing(ensemble, config.kernel)
    return apply_whole_ensemble_rescaling(ensemble, config.kernel)


def assimilation_cycle(prior, obs, setup: ObservationSetup, config: FilterConfig):
    """Smooth the prior spectrum, inflate, then run the localized ETKF analysis."""
    E = smooth_prior(prior, config)
    E = inflate(E, config.rho)
    L = None if math.isinf(config.c) else localization_matrix(E.shape[1], config.c)
    return etkf_assimilate(E, obs, setup, L, config.additive)
