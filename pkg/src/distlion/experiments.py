"""Desk-scale experiments shared by the scripts, the check suites and the tests.

Two studies live here:

* :func:`worker_sweep` measures the KKT-score noise floor of the sign methods
  as the number of workers grows, on a noisy quadratic whose unconstrained
  optimum lies outside the feasible box.
* :func:`desk_comparison` trains a two-class logistic model with every method
  and reports final training accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import METHOD_DEFAULTS, ProblemSpec, RunConfig
from .dist_sim import run_training
from .errors import DivergenceError

__all__ = [
    "SWEEP_PROBLEM",
    "sweep_config",
    "worker_sweep",
    "SweepResult",
    "COMPARISON_PROBLEM",
    "COMPARISON_METHODS",
    "TUNING_SEEDS",
    "LR_GRID",
    "TUNED_LR",
    "comparison_config",
    "desk_comparison",
    "tune_learning_rates",
    "ComparisonResult",
]

# -- worker-count sweep ------------------------------------------------------

# f(x) = 0.005 ||x - 20||^2 with lambda = 0.1: the box is [-10, 10]^d and the
# constrained optimum sits on its corner, where the KKT score is driven by how
# often the aggregated sign disagrees with the true gradient sign.
SWEEP_PROBLEM = ProblemSpec(
    kind="quadratic", dim=10, curvature_min=0.01, curvature_max=0.01, optimum=20.0, sigma=1.0
)


def sweep_config(method: str, workers: int, seed: int, rounds: int = 5000) -> RunConfig:
    return RunConfig(
        method=method,
        workers=workers,
        batch_size=1,
        rounds=rounds,
        seed=seed,
        lr=0.01,
        weight_decay=0.1,
        problem=SWEEP_PROBLEM,
    )


@dataclass
class SweepResult:
    workers: tuple
    seeds: tuple
    floors: dict = field(default_factory=dict)  # method -> array (len(seeds), len(workers))

    def rows(self):
        for method, table in self.floors.items():
            for i, seed in enumerate(self.seeds):
                for j, n in enumerate(self.workers):
                    yield method, seed, n, float(table[i, j])


def worker_sweep(
    methods: Sequence[str] = ("d_lion_mavo", "d_lion_avg"),
    workers: Sequence[int] = (4, 64),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    rounds: int = 5000,
) -> SweepResult:
    out = SweepResult(tuple(workers), tuple(seeds))
    for method in methods:
        table = np.empty((len(seeds), len(workers)))
        for i, seed in enumerate(seeds):
            for j, n in enumerate(workers):
                table[i, j] = run_training(sweep_config(method, n, seed, rounds)).summary["kkt_noise_floor"]
        out.floors[method] = table
    return out


# -- logistic comparison -----------------------------------------------------

COMPARISON_PROBLEM = ProblemSpec(kind="logistic", dim=20, n_samples=2000, separation=4.0)
COMPARISON_METHODS = ("d_lion_mavo", "d_lion_avg", "g_adamw", "terngrad", "graddrop", "dgc")
TUNING_SEEDS = (100, 101, 102)
LR_GRID = (3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0)

# Per-method learning rates chosen by tune_learning_rates() on TUNING_SEEDS
# (disjoint from the evaluation seeds); weight decays stay at the per-method
# defaults. Regenerate with ``scripts/desk_comparison.py --tune``.
TUNED_LR = {
    "d_lion_mavo": 0.001,
    "d_lion_avg": 0.003,
    "g_adamw": 0.003,
    "terngrad": 0.1,
    "graddrop": 0.1,
    "dgc": 0.1,
}


def comparison_config(method: str, seed: int, lr: Optional[float] = None, rounds: int = 2000) -> RunConfig:
    if lr is None:
        lr = TUNED_LR.get(method) or METHOD_DEFAULTS[method][0]
    problem = ProblemSpec(**{**COMPARISON_PROBLEM.__dict__, "data_seed": seed})
    return RunConfig(
        method=method, workers=8, batch_size=32, rounds=rounds, seed=seed, lr=lr, problem=problem
    )


@dataclass
class ComparisonResult:
    seeds: tuple
    accuracy: dict = field(default_factory=dict)  # method -> list per seed
    final_loss: dict = field(default_factory=dict)
    learning_rates: dict = field(default_factory=dict)

    def mean_accuracy(self, method: str) -> float:
        return float(np.mean(self.accuracy[method]))


def desk_comparison(
    methods: Sequence[str] = COMPARISON_METHODS,
    seeds: Sequence[int] = (0, 1, 2),
    learning_rates: Optional[dict] = None,
    rounds: int = 2000,
) -> ComparisonResult:
    out = ComparisonResult(tuple(seeds))
    for method in methods:
        lr = (learning_rates or {}).get(method)
        accs, losses = [], []
        for seed in seeds:
            cfg = comparison_config(method, seed, lr, rounds)
            summary = run_training(cfg).summary
            accs.append(summary["final_accuracy"])
            losses.append(summary["final_loss"])
        out.accuracy[method] = accs
        out.final_loss[method] = losses
        out.learning_rates[method] = cfg.effective_lr
    return out


def tune_learning_rates(
    methods: Sequence[str] = COMPARISON_METHODS,
    grid: Sequence[float] = LR_GRID,
    seeds: Sequence[int] = TUNING_SEEDS,
    rounds: int = 2000,
    log=None,
) -> tuple[dict, dict]:
    """Best grid learning rate per method by mean final accuracy, ties broken by lower loss.

    Returns (chosen learning rates, {method: {lr: (accuracy, loss)}}).
    """
    chosen, table = {}, {}
    for method in methods:
        table[method] = {}
        for lr in grid:
            try:
                res = desk_comparison((method,), seeds, {method: lr}, rounds)
                score = (res.mean_accuracy(method), float(np.mean(res.final_loss[method])))
            except DivergenceError:
                score = (-np.inf, np.inf)
            table[method][lr] = score
            if log is not None:
                log(f"{method} lr={lr:g} acc={score[0]:.4f} loss={score[1]:.4f}")
        chosen[method] = max(grid, key=lambda lr: (table[method][lr][0], -table[method][lr][1]))
    return chosen, table
