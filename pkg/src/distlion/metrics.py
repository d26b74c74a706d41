"""KKT score, Phase I feasibility diagnostics and run summaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core_math import Hyperparams, as_param_vector, dist_to_feasible
from .errors import InvalidInputError

__all__ = [
    "kkt_score",
    "KktReport",
    "kkt_report",
    "noise_floor",
    "PhaseReport",
    "phase1_report",
    "summarize",
    "sign_bias_ratio",
    "NONNEG_TOL",
    "CONTRACTION_TOL",
]

NONNEG_TOL = 1e-9
CONTRACTION_TOL = 1e-9


def kkt_score(full_grad, x, lam: float) -> float:
    """<grad f(x), sign(grad f(x)) + lam * x>.

    Zero at KKT points of min f s.t. ||lam x||_inf <= 1 and nonnegative inside
    that box. With lam = 0 it is exactly ||grad f||_1.
    """
    g = as_param_vector(full_grad)
    x = as_param_vector(x)
    if g.shape != x.shape:
        raise InvalidInputError("gradient and parameter lengths differ")
    return float(np.add.reduce(g * (np.sign(g) + lam * x)))


def noise_floor(values: Sequence[float]) -> float:
    """Mean over the final quarter of the rounds (at least one value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("no values")
    tail = max(1, v.size // 4)
    return float(v[-tail:].mean())


@dataclass(frozen=True)
class KktReport:
    values: np.ndarray
    running_average: np.ndarray
    noise_floor: float
    min_value: float


def kkt_report(values: Sequence[float]) -> KktReport:
    v = np.asarray(values, dtype=np.float64)
    run = np.cumsum(v) / np.arange(1, v.size + 1)
    return KktReport(v, run, noise_floor(v), float(v.min()))


@dataclass(frozen=True)
class PhaseReport:
    dist_l2: np.ndarray
    dist_linf: np.ndarray
    entry_round: Optional[int]
    ratios_l2: np.ndarray
    ratios_linf: np.ndarray
    bound: float
    violations: tuple  # (round, norm, ratio) for every step exceeding the bound
    left_box: tuple  # rounds at which a trajectory that had entered F left it again

    @property
    def ok(self) -> bool:
        return not self.violations and not self.left_box


def _ratios(dist: np.ndarray) -> np.ndarray:
    prev, nxt = dist[:-1], dist[1:]
    out = np.full(prev.shape, np.nan)
    pos = prev > 0
    out[pos] = nxt[pos] / prev[pos]
    return out


def phase1_report(trajectory, h: Hyperparams, lrs: Optional[Sequence[float]] = None) -> PhaseReport:
    """Per-step contraction of the distance to the box, in l2 and l-infinity.

    A step from round t to t+1 with positive distance must satisfy
    dist_{t+1} / dist_t <= (1 - lr_t * lambda) + ``CONTRACTION_TOL``.
    ``lrs`` gives the step size of each transition when a schedule is used.
    """
    xs = [as_param_vector(x) for x in trajectory]
    if not xs:
        raise InvalidInputError("empty trajectory")
    lam = h.weight_decay
    l2 = np.array([dist_to_feasible(x, lam, "l2") for x in xs])
    linf = np.array([dist_to_feasible(x, lam, "linf") for x in xs])
    steps = len(xs) - 1
    lr = np.full(steps, h.lr) if lrs is None else np.asarray(lrs, dtype=np.float64)[:steps]
    factor = 1.0 - lr * lam
    violations = []
    for name, dist in (("l2", l2), ("linf", linf)):
        for t in range(steps):
            if dist[t] > 0 and dist[t + 1] > (factor[t] + CONTRACTION_TOL) * dist[t]:
                violations.append((t, name, float(dist[t + 1] / dist[t])))
    inside = l2 == 0
    entry = int(np.argmax(inside)) if inside.any() else None
    left = tuple(int(t) for t in range(entry + 1, len(xs)) if not inside[t]) if entry is not None else ()
    bound = float(factor.max()) if steps else 1.0 - h.lr * lam
    return PhaseReport(l2, linf, entry, _ratios(l2), _ratios(linf), bound, tuple(violations), left)


def summarize(run) -> dict:
    """Summary record for a RunLog (or any object with a ``rounds`` list of RoundLog)."""
    rounds = run.rounds
    if not rounds:
        raise InvalidInputError("run has no rounds")
    kkt = [r.kkt_score for r in rounds]
    full = [r.full_loss for r in rounds]
    entered = next((r.round for r in rounds if r.dist_f == 0.0), None)
    out = {
        "rounds": len(rounds),
        "final_loss": rounds[-1].full_loss,
        "best_loss": float(min(full)),
        "final_batch_loss": rounds[-1].loss,
        "final_kkt_score": rounds[-1].kkt_score,
        "mean_kkt_score": float(np.mean(kkt)),
        "kkt_noise_floor": noise_floor(kkt),
        "final_dist_f": rounds[-1].dist_f,
        "total_up_bits": int(sum(r.up_bits for r in rounds)),
        "total_down_bits": int(sum(r.down_bits for r in rounds)),
        "round_entered_f": entered,
    }
    if rounds[-1].accuracy is not None:
        out["final_accuracy"] = rounds[-1].accuracy
    return out


def sign_bias_ratio(samples) -> np.ndarray:
    """Empirical E[m] / E[sign(m)] per coordinate from samples stacked on axis 0.

    Diagnostic for the bias-correction assumption; coordinates whose mean sign
    is zero report 0.
    """
    s = np.asarray(samples, dtype=np.float64)
    mean = s.mean(axis=0)
    mean_sign = np.sign(s).mean(axis=0)
    out = np.zeros_like(mean)
    nz = mean_sign != 0
    out[nz] = mean[nz] / mean_sign[nz]
    return out
