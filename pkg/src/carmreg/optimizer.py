"""Adaptive simulated annealing over box-bounded continuous domains.

Corana-style variant: one coordinate move per dimension per cycle, step
vectors retuned from per-dimension acceptance ratios so roughly half of
all proposals keep being accepted, geometric cooling every N_T step
adjustments, and a restart from the incumbent best after every
temperature drop.  Minimizes; callers that maximize pass the negated
objective.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AnnealConfig",
    "AnnealResult",
    "AnnealTrace",
    "adjust_step",
    "anneal",
]


@dataclass(frozen=True)
class AnnealConfig:
    """Knobs for :func:`anneal`.

    ``initial_temperature=None`` uses ``|f(x0)|`` so the first sweeps
    accept almost anything regardless of the objective's natural scale.
    ``initial_step=None`` starts at half the box width per dimension.
    ``steps_per_cycle`` (N_s) counts cycles between step adjustments;
    ``cycles_per_temperature`` (N_T) counts adjustments per cooling.
    """

    initial_temperature: float | None = None
    temperature_reduction: float = 0.85
    steps_per_cycle: int = 20
    cycles_per_temperature: int = 5
    step_adjust_factor: float = 2.0
    termination_epsilon: float = 1e-4
    termination_levels: int = 4
    max_evaluations: int = 20000
    initial_step: float | np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.initial_temperature is not None and self.initial_temperature < 0:
            raise ValueError("initial_temperature must be >= 0")
        if not 0.0 < self.temperature_reduction < 1.0:
            raise ValueError("temperature_reduction must be in (0, 1)")
        if self.steps_per_cycle < 1 or self.cycles_per_temperature < 1:
            raise ValueError("cycle counts must be >= 1")
        if self.step_adjust_factor <= 0:
            raise ValueError("step_adjust_factor must be positive")
        if self.termination_epsilon <= 0 or self.termination_levels < 1:
            raise ValueError("bad termination settings")
        if self.max_evaluations < 1:
            raise ValueError("max_evaluations must be >= 1")


class AnnealTrace:
    """Per-evaluation record: index, candidate, score, accepted, temperature."""

    def __init__(self, ndim):
        self._ndim = ndim
        self._eval = []
        self._x = []
        self._score = []
        self._accepted = []
        self._temperature = []

    def append(self, index, x, score, accepted, temperature):
        self._eval.append(index)
        self._x.append(np.array(x, dtype=np.float64))
        self._score.append(score)
        self._accepted.append(accepted)
        self._temperature.append(temperature)

    def __len__(self):
        return len(self._eval)

    @property
    def evaluation(self):
        return np.asarray(self._eval, dtype=np.int64)

    @property
    def candidates(self):
        if not self._x:
            return np.zeros((0, self._ndim))
        return np.stack(self._x)

    @property
    def score(self):
        return np.asarray(self._score, dtype=np.float64)

    @property
    def accepted(self):
        return np.asarray(self._accepted, dtype=bool)

    @property
    def temperature(self):
        return np.asarray(self._temperature, dtype=np.float64)

    def to_csv(self, path):
        cols = ",".join(f"x{i}" for i in range(self._ndim))
        header = f"eval,{cols},score,accepted,temperature"
        rows = np.column_stack([
            self.evaluation,
            self.candidates,
            self.score,
            self.accepted.astype(np.int64),
            self.temperature,
        ])
        np.savetxt(path, rows, delimiter=",", header=header, comments="",
                   fmt=["%d"] + ["%.17g"] * self._ndim
                       + ["%.17g", "%d", "%.17g"])


@dataclass(frozen=True)
class AnnealResult:
    x_best: np.ndarray
    score_best: float
    evaluations: int
    converged: bool
    trace: AnnealTrace


def adjust_step(step, ratio, factor=2.0):
    """Corana step update: widen when >60% accepted, shrink when <40%."""
    if ratio > 0.6:
        return step * (1.0 + factor * (ratio - 0.6) / 0.4)
    if ratio < 0.4:
        return step / (1.0 + factor * (0.4 - ratio) / 0.4)
    return step


def anneal(objective, x0, lower, upper, config=None, rng=None):
    """Minimize ``objective`` over the box ``[lower, upper]``.

    ``objective`` maps a 1-D float array to a scalar.  ``rng`` (a seed or
    ``numpy.random.Generator``) overrides ``config.seed``; given either,
    the search is fully deterministic.  Termination: current scores at
    the last ``termination_levels`` coolings all within
    ``termination_epsilon`` of each other and of the best, or the
    evaluation budget runs out.
    """
    cfg = config if config is not None else AnnealConfig()
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    x = np.array(x0, dtype=np.float64).ravel()
    ndim = x.size
    if lo.shape != x.shape or hi.shape != x.shape:
        raise ValueError("bounds must match the shape of x0")
    if np.any(lo >= hi):
        raise ValueError("lower bounds must be strictly below upper bounds")
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("x0 must lie inside the bounds")
    if rng is None:
        rng = cfg.seed
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)

    width = hi - lo
    if cfg.initial_step is None:
        step = 0.5 * width
    else:
        step = np.broadcast_to(
            np.asarray(cfg.initial_step, dtype=np.float64), x.shape
        ).copy()
        if np.any(step <= 0):
            raise ValueError("initial_step must be positive")
        step = np.minimum(step, width)

    f = float(objective(x))
    if not math.isfinite(f):
        raise ValueError("objective is not finite at x0")
    evals = 1
    best_x = x.copy()
    best_f = f
    if cfg.initial_temperature is not None:
        temp = cfg.initial_temperature
    else:
        temp = max(abs(f), 1e-12)
    trace = AnnealTrace(ndim)
    trace.append(evals, x, f, True, temp)

    history = deque(maxlen=cfg.termination_levels)
    converged = False
    exhausted = evals >= cfg.max_evaluations

    while not exhausted and not converged:
        for _ in range(cfg.cycles_per_temperature):
            accepted = np.zeros(ndim, dtype=np.int64)
            for _ in range(cfg.steps_per_cycle):
                for h in range(ndim):
                    if evals >= cfg.max_evaluations:
                        exhausted = True
                        break
                    cand = x.copy()
                    cand[h] = x[h] + step[h] * gen.uniform(-1.0, 1.0)
                    if cand[h] < lo[h] or cand[h] > hi[h]:
                        cand[h] = gen.uniform(lo[h], hi[h])
                    fc = float(objective(cand))
                    evals += 1
                    took = False
                    if fc <= f:
                        took = True
                        if fc < best_f:
                            best_x, best_f = cand.copy(), fc
                    elif temp > 0.0:
                        took = gen.uniform() < math.exp(
                            max((f - fc) / temp, -745.0))
                    trace.append(evals, cand, fc, took, temp)
                    if took:
                        x, f = cand, fc
                        accepted[h] += 1
                if exhausted:
                    break
            if exhausted:
                break
            ratios = accepted / float(cfg.steps_per_cycle)
            step = np.minimum(
                np.array(
                    [adjust_step(step[h], ratios[h], cfg.step_adjust_factor)
                     for h in range(ndim)]
                ),
                width,
            )
        if (
            len(history) == cfg.termination_levels
            and all(abs(f - past) <= cfg.termination_epsilon
                    for past in history)
            and f - best_f <= cfg.termination_epsilon
        ):
            converged = True
            break
        history.append(f)
        temp *= cfg.temperature_reduction
        x = best_x.copy()
        f = best_f

    return AnnealResult(
        x_best=best_x,
        score_best=best_f,
        evaluations=evals,
        converged=converged,
        trace=trace,
    )
