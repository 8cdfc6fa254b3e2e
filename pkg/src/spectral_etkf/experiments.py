"""Lorenz 96 twin experiments: truth, observations, cycling, tuning, diagnostics."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, ModelConfig, climatological_std
from .ensemble import as_ensemble, decompose, propagate, spread
from .errors import (
    DegenerateEnsembleError,
    NumericalFailureError,
    NumericalOverflowError,
    TuningFailureError,
)
from .filter import ObservationSetup, assimilation_cycle
from .models import generate_truth, spin_up
from .spectral import apply_spectrum_smoothing, gaussian_kernel, mean_power_spectrum

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50
FREE_RUN_TIME = 48.8


def make_rng(seed, stream=0):
    """Philox generator for one named stream of a seeded experiment."""
    ss = np.random.SeedSequence(int(seed)).spawn(stream + 1)[stream]
    return np.random.Generator(np.random.Philox(ss))


# Stream ids, fixed so adding a stream never perturbs the others.
OBS_STREAM, ENSEMBLE_STREAM = 0, 1


def _as_rng(seed_or_rng, stream):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(seed_or_rng, stream)


def make_observations(truth, setup: ObservationSetup, seed):
    """y_j = H u_j + e_j with e_j ~ N(0, diag(noise_std^2)), one row per cycle."""
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    rng = _as_rng(seed, OBS_STREAM)
    noise = rng.standard_normal((truth.shape[0], setup.size)) * setup.noise_std
    return truth[:, setup.observed_indices] + noise


def initial_ensemble(truth0, K: int, spread: float, seed):
    """K members scattered around ``truth0`` with i.i.d. N(0, spread^2) noise."""
    if K < 2:
        raise DegenerateEnsembleError(f"need at least 2 members, got {K}")
    if not spread > 0:
        raise DegenerateEnsembleError(f"initial spread must be positive, got {spread}")
    truth0 = np.asarray(truth0, dtype=float)
    rng = _as_rng(seed, ENSEMBLE_STREAM)
    return truth0 + spread * rng.standard_normal((K, truth0.size))


@lru_cache(maxsize=8)
def _reference_run(model: ModelConfig, steps_per_cycle: int, n_cycles: int):
    params = model.params
    x0 = spin_up(params, model.spinup_perturbation, model.spinup_duration)
    truth = generate_truth(x0, params, n_cycles, steps_per_cycle)
    x0.setflags(write=False)
    truth.setflags(write=False)
    return x0, truth


def reference_run(cfg: ExperimentConfig):
    """Spun-up initial state and truth trajectory (cached per model/schedule)."""
    return _reference_run(cfg.model, cfg.observation.steps_per_cycle, cfg.run.n_cycles)


def observation_setup(cfg: ExperimentConfig):
    return ObservationSetup.every(cfg.model.N, cfg.observation.resolution_stride, cfg.noise_std)


def _climatology(cfg, truth):
    try:
        return climatological_std(cfg.model.F)
    except ConfigError:
        return float(np.std(truth))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    times: np.ndarray
    rmse: np.ndarray
    spread: np.ndarray
    time_averaged_rmse: float
    diverged: bool = False
    divergence_cycle: int | None = None
    failure: str | None = None
    wall_time: float = 0.0

    @property
    def completed_cycles(self):
        return self.rmse.size


def windowed_rmse(rmse, window):
    return float(np.mean(rmse[-window:]))


def run_twin_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Cycle the filter against a synthetic truth and record posterior RMSE.

    RMSE_j = ||m_j - u_j|| / sqrt(N) with m_j the posterior mean. The run
    stops early, flagged as diverged, if RMSE stays above 10x the
    climatological std for 50 consecutive cycles or the numerics fail; the
    series computed so far are kept.
    """
    start = time.perf_counter()
    params = cfg.model.params
    steps = cfg.observation.steps_per_cycle
    n_cycles = cfg.run.n_cycles
    x0, truth = reference_run(cfg)
    setup = observation_setup(cfg)
    obs = make_observations(truth, setup, cfg.run.seed)
    fcfg = cfg.filter.filter_config
    threshold = DIVERGENCE_FACTOR * _climatology(cfg, truth)

    E = initial_ensemble(x0, cfg.filter.K, cfg.initial_spread, cfg.run.seed)
    rmse = np.empty(n_cycles)
    spreads = np.empty(n_cycles)
    over = 0
    failure = None
    divergence_cycle = None
    done = 0
    sqrt_n = math.sqrt(params.N)
    for j in range(n_cycles):
        try:
            E = propagate(E, params, steps)
            E = assimilation_cycle(E, obs[j], setup, fcfg)
        except (NumericalOverflowError, NumericalFailureError, DegenerateEnsembleError) as exc:
            failure = f"cycle {j + 1}: {exc}"
            divergence_cycle = j + 1
            break
        err = E.mean(axis=0) - truth[j]
        rmse[j] = float(np.sqrt(err @ err)) / sqrt_n
        spreads[j] = spread(E)
        done = j + 1
        over = over + 1 if rmse[j] > threshold else 0
        if over >= DIVERGENCE_PATIENCE:
            divergence_cycle = j + 1
            failure = f"RMSE above {threshold:.4g} for {DIVERGENCE_PATIENCE} consecutive cycles"
            break
    rmse, spreads = rmse[:done], spreads[:done]
    diverged = failure is not None
    if diverged:
        log.info("run diverged (seed %d): %s", cfg.run.seed, failure)
    return ExperimentResult(
        config=cfg,
        times=np.arange(1, done + 1) * cfg.cycle_interval,
        rmse=rmse,
        spread=spreads,
        time_averaged_rmse=math.inf if diverged else windowed_rmse(rmse, cfg.run.rmse_window),
        diverged=diverged,
        divergence_cycle=divergence_cycle,
        failure=failure,
        wall_time=time.perf_counter() - start,
    )


def run_seeds(cfg: ExperimentConfig, seeds):
    return [run_twin_experiment(cfg.with_run(seed=int(s))) for s in seeds]


# --------------------------------------------------------------------------
# semi-joint tuning


@dataclass(frozen=True)
class TuningCell:
    rho: float
    c: float
    sigma: float
    rmse: float
    diverged: bool
    stage: int
    seed_rmse: tuple = ()


@dataclass
class TuningResult:
    best: ExperimentConfig
    best_rmse: float
    cells: list = field(default_factory=list)

    def best_cell(self, stage=None):
        """The cell behind ``best``, or the optimum of one tuning ``stage``.

        Stage 1 runs with smoothing disabled, so ``best_cell(1)`` is the
        tuned baseline filter on the same (rho, c) grid.
        """
        if stage is None:
            f = self.best.filter
            return next(c for c in self.cells if (c.rho, c.c, c.sigma) == (f.rho, f.c, f.sigma))
        return _CellCache.best([c for c in self.cells if c.stage == stage])


def _evaluate_cell(args):
    cfg, seeds = args
    results = run_seeds(cfg, seeds)
    per_seed = tuple(r.time_averaged_rmse for r in results)
    diverged = any(r.diverged for r in results)
    return (math.inf if diverged else float(np.mean(per_seed))), diverged, per_seed


class _CellCache:
    """Evaluates (rho, c, sigma) cells once each, optionally in parallel."""

    def __init__(self, base, seeds, jobs):
        self.base = base
        self.seeds = tuple(seeds)
        self.jobs = jobs
        self.done = {}
        self.order = []

    def evaluate(self, keys, stage):
        todo = [k for k in dict.fromkeys(keys) if k not in self.done]
        tasks = [(self.base.with_filter(rho=r, c=c, sigma=s), self.seeds) for r, c, s in todo]
        if self.jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                outcomes = list(pool.map(_evaluate_cell, tasks))
        else:
            outcomes = [_evaluate_cell(t) for t in tasks]
        for key, (rmse, diverged, per_seed) in zip(todo, outcomes):
            self.done[key] = TuningCell(*key, rmse=rmse, diverged=diverged, stage=stage, seed_rmse=per_seed)
            self.order.append(key)
        return [self.done[k] for k in keys]

    @staticmethod
    def best(cells):
        # min() keeps the first of equal cells, so ties resolve in grid order.
        return min(cells, key=lambda cell: cell.rmse)


def semi_joint_tune(base: ExperimentConfig, rho_grid, c_grid, sigma_grid, jobs=1, seeds=None):
    """Tune (rho, c) with smoothing off, then sigma, then (rho, c) again.

    Each cell is scored by the mean time-averaged RMSE over ``seeds``
    (default: the base config's seed); a cell diverging for any seed scores
    inf. Returns the stage-3 optimum and every evaluated cell in evaluation
    order. Raises :class:`TuningFailureError` if all cells diverge.
    """
    rho_grid, c_grid, sigma_grid = list(rho_grid), list(c_grid), list(sigma_grid)
    if not (rho_grid and c_grid and sigma_grid):
        raise ValueError("tuning grids must be nonempty")
    seeds = [base.run.seed] if seeds is None else list(seeds)
    cache = _CellCache(base, seeds, jobs)

    stage1 = cache.evaluate([(r, c, 0.0) for r, c in itertools.product(rho_grid, c_grid)], 1)
    first = cache.best(stage1)
    stage2 = cache.evaluate([(first.rho, first.c, s) for s in sigma_grid], 2)
    sigma = cache.best(stage2).sigma
    stage3 = cache.evaluate([(r, c, sigma) for r, c in itertools.product(rho_grid, c_grid)], 3)
    winner = cache.best(stage3)

    cells = [cache.done[k] for k in cache.order]
    if all(cell.diverged for cell in cells):
        raise TuningFailureError("every tuning cell diverged", cells)
    return TuningResult(
        best=base.with_filter(rho=winner.rho, c=winner.c, sigma=winner.sigma),
        best_rmse=winner.rmse,
        cells=cells,
    )


def tune_baseline(base: ExperimentConfig, rho_grid, c_grid, jobs=1, seeds=None):
    """Grid search of (rho, c) for the ETKF without smoothing."""
    return semi_joint_tune(base.with_filter(mode="off"), rho_grid, c_grid, [0.0], jobs, seeds)


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class DiagnosticsResult:
    times: np.ndarray
    variance_ratio: np.ndarray  # (n_snapshots, N), after / before smoothing
    offdiag_ratio: np.ndarray  # (n_snapshots, N), cov(i, i+1) after / before
    variance_undefined: np.ndarray
    offdiag_undefined: np.ndarray


def smoothing_ratios(prior, kernel):
    """Ratios of prior (co)variances after/before one spectrum smoothing.

    Returns ``(variance_ratio, offdiag_ratio, variance_undefined,
    offdiag_undefined)``; ratios with a zero denominator are NaN and flagged.
    """
    E = as_ensemble(prior)
    before = decompose(E).perturbations
    after = decompose(apply_spectrum_smoothing(E, kernel)).perturbations

    def diag_and_offdiag(P):
        return np.einsum("kn,kn->n", P, P), np.einsum("kn,kn->n", P, np.roll(P, -1, axis=1))

    vb, ob = diag_and_offdiag(before)
    va, oa = diag_and_offdiag(after)
    scale = max(float(np.abs(vb).max()), np.finfo(float).tiny)
    v_bad = np.abs(vb) <= 1e-14 * scale
    o_bad = np.abs(ob) <= 1e-14 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        vr = np.where(v_bad, np.nan, va / np.where(v_bad, 1.0, vb))
        orat = np.where(o_bad, np.nan, oa / np.where(o_bad, 1.0, ob))
    return vr, orat, v_bad, o_bad


def _snapshot_cycles(cfg, snapshot_times):
    interval = cfg.cycle_interval
    cycles = []
    for t in snapshot_times:
        j = int(round(t / interval))
        if j < 1 or j > cfg.run.n_cycles or abs(j * interval - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"snapshot time {t} is not an assimilation time (interval {interval})")
        cycles.append(j)
    return cycles


def smoothing_diagnostics(cfg: ExperimentConfig, snapshot_times) -> DiagnosticsResult:
    """Inhomogeneous inflation/localization implied by spectrum smoothing.

    Cycles the configured filter and, at each snapshot, compares the prior
    covariance diagonal and first cyclic off-diagonal before and after the
    smoothing alone (no inflation or localization in the comparison).
    """
    params = cfg.model.params
    x0, truth = reference_run(cfg)
    setup = observation_setup(cfg)
    obs = make_observations(truth, setup, cfg.run.seed)
    fcfg = cfg.filter.filter_config
    kernel = gaussian_kernel(cfg.filter.sigma)
    wanted = _snapshot_cycles(cfg, snapshot_times)
    last = max(wanted)

    E = initial_ensemble(x0, cfg.filter.K, cfg.initial_spread, cfg.run.seed)
    found = {}
    for j in range(1, last + 1):
        E = propagate(E, params, cfg.observation.steps_per_cycle)
        if j in wanted:
            found[j] = smoothing_ratios(E, kernel)
        E = assimilation_cycle(E, obs[j - 1], setup, fcfg)
    parts = [found[j] for j in wanted]
    return DiagnosticsResult(
        times=np.array(wanted) * cfg.cycle_interval,
        variance_ratio=np.array([p[0] for p in parts]),
        offdiag_ratio=np.array([p[1] for p in parts]),
        variance_undefined=np.array([p[2] for p in parts]),
        offdiag_undefined=np.array([p[3] for p in parts]),
    )


# --------------------------------------------------------------------------
# free-run spectra


@dataclass
class SpectrumDump:
    K: int
    time: float
    raw: np.ndarray
    smoothed: np.ndarray | None


def free_run_spectrum_study(cfg: ExperimentConfig, sizes, with_smoothing=True, t_end=FREE_RUN_TIME):
    """Mean power spectra of free-running ensembles of several sizes.

    One initial ensemble of ``max(sizes)`` members is drawn around the
    spun-up state and truncated to each size, so smaller ensembles are
    subsets of larger ones. Each is integrated to ``t_end`` without
    assimilation; ``smoothed`` holds the spectrum after one application of
    the configured smoothing kernel.
    """
    sizes = [int(k) for k in sizes]
    if not sizes:
        raise ValueError("need at least one ensemble size")
    params = cfg.model.params
    x0, _ = reference_run(cfg.with_run(n_cycles=1, rmse_window=1))
    pool = initial_ensemble(x0, max(sizes), cfg.initial_spread, cfg.run.seed)
    steps = int(round(t_end / params.dt))
    # Members evolve independently, so one run of the largest ensemble serves every size.
    final = propagate(pool, params, steps)
    kernel = gaussian_kernel(cfg.filter.sigma)
    dumps = []
    for K in sizes:
        E = final[:K]
        smoothed = mean_power_spectrum(apply_spectrum_smoothing(E, kernel)) if with_smoothing else None
        dumps.append(SpectrumDump(K=K, time=steps * params.dt, raw=mean_power_spectrum(E), smoothed=smoothed))
    return dumps


# --------------------------------------------------------------------------
# CSV output


def _fmt(x):
    return repr(float(x))


def write_result_csv(path, result: ExperimentResult):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "time", "rmse", "spread"])
        for j, (t, e, s) in enumerate(zip(result.times, result.rmse, result.spread), start=1):
            w.writerow([j, f"{t:.10g}", _fmt(e), _fmt(s)])


def write_tuning_csv(path, cells):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "c", "sigma", "rmse", "diverged"])
        for cell in cells:
            w.writerow([_fmt(cell.rho), _fmt(cell.c), _fmt(cell.sigma), _fmt(cell.rmse), int(cell.diverged)])


def write_diagnostics_csv(path, diag: DiagnosticsResult):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "component", "variance_ratio", "offdiag_ratio"])
        for t, vr, orat in zip(diag.times, diag.variance_ratio, diag.offdiag_ratio):
            for n, (a, b) in enumerate(zip(vr, orat)):
                w.writerow([f"{t:.10g}", n, _fmt(a), _fmt(b)])
