"""Single-node step functions: Lion, SIGNUM, AdamW and the shared update rule.

Every function is pure: it takes an explicit state value and returns a new one.
Lion and SIGNUM only produce the sign update; moving the parameters is left to
:func:`apply_update` so distributed and global variants share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import Hyperparams, as_param_vector
from .errors import ContractViolationError, InvalidInputError, InvalidParameterError

__all__ = [
    "LionState",
    "SignumState",
    "AdamWState",
    "lion_delta",
    "lion_direction",
    "signum_delta",
    "adamw_direction",
    "adamw_step",
    "apply_update",
    "decayed_step",
    "cosine_lr",
]


@dataclass(frozen=True)
class LionState:
    momentum: np.ndarray

    @classmethod
    def zeros(cls, d: int) -> "LionState":
        return cls(np.zeros(d))


@dataclass(frozen=True)
class SignumState:
    momentum: np.ndarray
    beta: float = 0.99

    def __post_init__(self):
        # beta = 0 is allowed: it is plain SignSGD
        if not 0.0 <= self.beta < 1.0:
            raise InvalidParameterError(f"signum beta must lie in [0, 1), got {self.beta}")

    @classmethod
    def zeros(cls, d: int, beta: float = 0.99) -> "SignumState":
        return cls(np.zeros(d), beta)


@dataclass(frozen=True)
class AdamWState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, d: int) -> "AdamWState":
        return cls(np.zeros(d), np.zeros(d), 0)


def _check_grad(state_vec: np.ndarray, grad) -> np.ndarray:
    # states may hold one row per worker; shapes just have to agree
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state_vec.shape:
        raise InvalidInputError(f"gradient length {g.size} != state length {state_vec.size}")
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("gradient contains non-finite entries")
    return g


def lion_delta(state: LionState, grad, h: Hyperparams) -> tuple[np.ndarray, LionState]:
    """Sign update and new momentum from one gradient sample.

    delta = sign(beta1 * m + (1 - beta1) * g) and m' = beta2 * m + (1 - beta2) * g,
    both from the same sample; the parameters are not touched.
    """
    m = state.momentum
    g = _check_grad(m, grad)
    delta = np.sign(h.beta1 * m + (1.0 - h.beta1) * g).astype(np.int8)
    return delta, LionState(h.beta2 * m + (1.0 - h.beta2) * g)


def lion_direction(m: np.ndarray, g: np.ndarray, beta1: float) -> np.ndarray:
    """The interpolated momentum sign(beta1 * m + (1 - beta1) * g) is taken of."""
    return beta1 * m + (1.0 - beta1) * g


def signum_delta(state: SignumState, grad) -> tuple[np.ndarray, SignumState]:
    m = state.momentum
    g = _check_grad(m, grad)
    new_m = state.beta * m + (1.0 - state.beta) * g
    return np.sign(new_m).astype(np.int8), SignumState(new_m, state.beta)


def decayed_step(x: np.ndarray, direction: np.ndarray, lr: float, weight_decay: float) -> np.ndarray:
    """x - lr * (direction + weight_decay * x), with no bound on the direction."""
    return x - lr * (direction + weight_decay * x)


def apply_update(x, delta, h: Hyperparams) -> np.ndarray:
    """Apply an aggregated update with decoupled weight decay.

    The aggregated update must satisfy ||delta||_inf <= 1, which both the
    averaging and the majority-vote rules guarantee. ``x`` may be a stack of
    per-worker rows; ``delta`` is broadcast over them.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != x.shape[-1:] and delta.shape != x.shape:
        raise InvalidInputError("update and parameter lengths differ")
    if delta.size and np.abs(delta).max() > 1.0:
        raise ContractViolationError("aggregated update has ||delta||_inf > 1")
    return decayed_step(x, delta, h.lr, h.weight_decay)


def adamw_direction(
    state: AdamWState, grad, betas: tuple[float, float] = (0.9, 0.999), eps_hat: float = 1e-8
) -> tuple[np.ndarray, AdamWState]:
    """Bias-corrected Adam direction m_hat / (sqrt(v_hat) + eps_hat) and the new moments."""
    if not eps_hat > 0:
        raise InvalidParameterError(f"eps_hat must be positive, got {eps_hat}")
    b1, b2 = betas
    if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
        raise InvalidParameterError(f"AdamW betas must lie in [0, 1), got {betas}")
    g = _check_grad(state.first_moment, grad)
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * g
    v = b2 * state.second_moment + (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return m_hat / (np.sqrt(v_hat) + eps_hat), AdamWState(m, v, t)


def adamw_step(
    state: AdamWState,
    x,
    grad,
    h: Hyperparams,
    betas: tuple[float, float] = (0.9, 0.999),
    eps_hat: float = 1e-8,
) -> tuple[np.ndarray, AdamWState]:
    x = as_param_vector(x)
    direction, new_state = adamw_direction(state, grad, betas, eps_hat)
    return decayed_step(x, direction, h.lr, h.weight_decay), new_state


def cosine_lr(base_lr: float, t: int, total: int) -> float:
    """Cosine decay from ``base_lr`` at t=0 towards 0 at t=total.

    The final rounds would get a zero step, so the schedule is evaluated at
    t / (total + 1) to keep every step positive.
    """
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / (total + 1)))
