"""Lorenz 96 dynamics, RK4 stepping, spin-up and truth trajectories.

States are 1-D float arrays of length N. Every routine here also accepts a
stack of states with shape ``(K, N)``; the dynamics act along the last axis
and rows never interact, so a stacked call gives bitwise the same numbers as
looping over the rows. Time stepping runs in a compiled loop; the numpy
tendency below is the reference it is tested against.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import InvalidModelError, NumericalOverflowError

MIN_DIMENSION = 4


@dataclass(frozen=True)
class ModelParams:
    N: int = 128
    F: float = 8.0
    dt: float = 0.01

    def __post_init__(self):
        if int(self.N) != self.N or self.N < MIN_DIMENSION:
            raise InvalidModelError(f"dimension must be an integer >= {MIN_DIMENSION}, got {self.N}")
        if not self.dt > 0:
            raise InvalidModelError(f"dt must be positive, got {self.dt}")


def _check_state(state, N=None):
    state = np.asarray(state, dtype=float)
    if state.ndim == 0 or state.shape[-1] < MIN_DIMENSION:
        raise InvalidModelError(
            f"Lorenz 96 needs at least {MIN_DIMENSION} components, got shape {state.shape}"
        )
    if N is not None and state.shape[-1] != N:
        raise InvalidModelError(f"state has {state.shape[-1]} components, model expects {N}")
    if not np.all(np.isfinite(state)):
        raise InvalidModelError("state contains non-finite values")
    return state


def _tendency(x, F):
    # ext[i] = x[i - 2] for i in 0..N+2, so the slices below are the
    # cyclic neighbours n-2, n-1 and n+1.
    ext = np.concatenate((x[..., -2:], x, x[..., :1]), axis=-1)
    return (ext[..., 3:] - ext[..., :-3]) * ext[..., 1:-2] - x + F


def lorenz96_tendency(state, F):
    """Return du/dt for the cyclic Lorenz 96 system.

    du_n/dt = (u_{n+1} - u_{n-2}) u_{n-1} - u_n + F
    """
    return _tendency(_check_state(state), F)


@njit(cache=True)
def _tendency_row(u, F, out):
    N = u.shape[0]
    out[0] = (u[1] - u[N - 2]) * u[N - 1] - u[0] + F
    out[1] = (u[2] - u[N - 1]) * u[0] - u[1] + F
    for n in range(2, N - 1):
        out[n] = (u[n + 1] - u[n - 2]) * u[n - 1] - u[n] + F
    out[N - 1] = (u[0] - u[N - 3]) * u[N - 2] - u[N - 1] + F


@njit(cache=True)
def _rk4_rows(x, F, dt, steps):
    """RK4-integrate each row of ``x`` independently; returns a new array."""
    K, N = x.shape
    out = x.copy()
    k1 = np.empty(N)
    k2 = np.empty(N)
    k3 = np.empty(N)
    k4 = np.empty(N)
    tmp = np.empty(N)
    half = 0.5 * dt
    sixth = dt / 6.0
    for r in range(K):
        u = out[r]
        for _ in range(steps):
            _tendency_row(u, F, k1)
            for n in range(N):
                tmp[n] = u[n] + half * k1[n]
            _tendency_row(tmp, F, k2)
            for n in range(N):
                tmp[n] = u[n] + half * k2[n]
            _tendency_row(tmp, F, k3)
            for n in range(N):
                tmp[n] = u[n] + dt * k3[n]
            _tendency_row(tmp, F, k4)
            for n in range(N):
                u[n] = u[n] + sixth * (k1[n] + 2.0 * k2[n] + 2.0 * k3[n] + k4[n])
    return out


def _bad_rows(x):
    if x.ndim == 1:
        return ()
    return tuple(int(k) for k in np.flatnonzero(~np.all(np.isfinite(x), axis=-1)))


def _integrate(x, params, steps):
    """Advance ``x`` by ``steps`` RK4 steps without validating the input.

    Finiteness is checked once at the end (non-finite values never recover),
    and on failure the run is replayed step by step to locate the offender.
    """
    F, dt = float(params.F), float(params.dt)
    rows = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
    out = _rk4_rows(rows, F, dt, steps)
    if not np.all(np.isfinite(out)):
        out = rows
        for step in range(1, steps + 1):
            out = _rk4_rows(out, F, dt, 1)
            if not np.all(np.isfinite(out)):
                bad = _bad_rows(out) if x.ndim == 2 else ()
                raise NumericalOverflowError(
                    f"non-finite state after RK4 step {step}", step=step, members=bad
                )
    return out.reshape(x.shape)


def rk4_step(state, params: ModelParams):
    """One classical fourth-order Runge-Kutta step of size ``params.dt``."""
    x = _check_state(state, params.N)
    return _integrate(x, params, 1)


def integrate(state, params: ModelParams, steps: int):
    """Apply ``steps`` consecutive RK4 steps."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    return _integrate(_check_state(state, params.N), params, int(steps))


def spin_up(params: ModelParams, perturbation: float = 1e-3, duration: float = 100.0):
    """Integrate from the perturbed fixed point until turbulence develops.

    The run starts at u_n = F for all n with ``perturbation`` added to the
    first component and lasts ``duration`` model time units.
    """
    if not duration > 0:
        raise ValueError(f"spin-up duration must be positive, got {duration}")
    x = np.full(params.N, float(params.F))
    x[0] += perturbation
    return _integrate(x, params, int(round(duration / params.dt)))


def generate_truth(initial, params: ModelParams, n_cycles: int, steps_per_cycle: int):
    """States at the observation times t_j = j * steps_per_cycle * dt, j = 1..n_cycles.

    Returns an array of shape ``(n_cycles, N)``.
    """
    if n_cycles < 1 or steps_per_cycle < 1:
        raise ValueError("n_cycles and steps_per_cycle must both be >= 1")
    x = _check_state(initial, params.N)
    out = np.empty((n_cycles, params.N))
    for j in range(n_cycles):
        x = _integrate(x, params, steps_per_cycle)
        out[j] = x
    return out


def write_truth_csv(path, trajectory, cycle_interval: float):
    """Dump a trajectory as ``cycle,time,u_0,...,u_{N-1}``."""
    trajectory = np.atleast_2d(trajectory)
    N = trajectory.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cycle", "time"] + [f"u_{n}" for n in range(N)])
        for j, row in enumerate(trajectory, start=1):
            writer.writerow([j, f"{j * cycle_interval:.10g}"] + [repr(float(v)) for v in row])
