"""Server-side aggregation, baseline gradient compressors and bandwidth accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .core_math import (
    as_param_vector,
    level_bits,
    pack_bits,
    _field_bits,
    _fields_from_bits,
    unpack_bits,
    sum_updates,
)
from .errors import CorruptStreamError, InvalidInputError, InvalidParameterError

__all__ = [
    "AggregatedUpdate",
    "aggregate_avg",
    "aggregate_majority",
    "aggregate",
    "terngrad_compress",
    "terngrad_decompress",
    "SparseUpdate",
    "CompressorState",
    "DgcConfig",
    "graddrop_compress",
    "dgc_compress",
    "dgc_keep_fraction",
    "pack_sparse",
    "unpack_sparse",
    "sparse_payload_bits",
    "BandwidthLedger",
    "METHODS",
    "bandwidth_of",
    "formula_bandwidth",
    "codec_bandwidth",
    "canonical_keep_fraction",
]

MODES = ("avg", "majority_vote")


@dataclass(frozen=True)
class AggregatedUpdate:
    values: np.ndarray
    mode: str


def _sum(deltas):
    deltas = list(deltas)
    if not deltas:
        raise InvalidInputError("no worker updates to aggregate")
    return sum_updates(deltas)


def aggregate_avg(deltas: Sequence[np.ndarray]) -> AggregatedUpdate:
    """Mean of the workers' sign updates: integer sum, then one division by N."""
    s = _sum(deltas)
    return AggregatedUpdate(s.values / s.worker_count, "avg")


def aggregate_majority(deltas: Sequence[np.ndarray]) -> AggregatedUpdate:
    """Coordinatewise majority vote sign(sum of updates); a tie gives 0."""
    s = _sum(deltas)
    return AggregatedUpdate(np.sign(s.values).astype(np.float64), "majority_vote")


def aggregate(deltas, mode: str) -> AggregatedUpdate:
    if mode == "avg":
        return aggregate_avg(deltas)
    if mode == "majority_vote":
        return aggregate_majority(deltas)
    raise InvalidParameterError(f"unknown aggregation mode {mode!r}")


# -- TernGrad ----------------------------------------------------------------

def terngrad_compress(g, rng, scale: Optional[float] = None) -> tuple[float, np.ndarray]:
    """Stochastic ternarization with E[scale * t] = g.

    ``t[k] = sign(g[k])`` with probability ``|g[k]| / scale`` and 0 otherwise.
    ``scale`` defaults to ``||g||_inf``; any larger value (a scale shared across
    workers) keeps the estimate unbiased.
    """
    g = as_param_vector(g)
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("gradient contains non-finite entries")
    s = float(np.abs(g).max()) if g.size else 0.0
    if scale is not None:
        if scale < s:
            raise InvalidParameterError("shared scale is smaller than ||g||_inf")
        s = float(scale)
    if s == 0.0:
        return 0.0, np.zeros(g.size, dtype=np.int8)
    keep = rng.random(g.size) < np.abs(g) / s
    return s, (np.sign(g) * keep).astype(np.int8)


def terngrad_decompress(scale: float, t: np.ndarray) -> np.ndarray:
    return scale * t.astype(np.float64)


# -- sparsifiers -------------------------------------------------------------

@dataclass(frozen=True)
class SparseUpdate:
    indices: np.ndarray
    values: np.ndarray
    dimension: int

    def __post_init__(self):
        idx = self.indices
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.dimension or (np.diff(idx) <= 0).any():
                raise InvalidInputError("sparse indices must be strictly increasing and in range")
        if (self.values == 0).any():
            raise InvalidInputError("sparse values must be nonzero")

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_dense(cls, v: np.ndarray) -> "SparseUpdate":
        idx = np.flatnonzero(v)
        return cls(idx.astype(np.int64), v[idx].astype(np.float64), v.size)


@dataclass(frozen=True)
class CompressorState:
    residual: np.ndarray
    velocity: np.ndarray
    warmup_round: int = 0

    @classmethod
    def zeros(cls, d: int) -> "CompressorState":
        return cls(np.zeros(d), np.zeros(d), 0)


def _top_k(a: np.ndarray, k: int) -> np.ndarray:
    # stable sort: ties resolved towards the lower coordinate index
    order = np.argsort(-np.abs(a), kind="stable")[:k]
    return np.sort(order)


def _k_for(keep_fraction: float, d: int) -> int:
    return min(d, max(1, math.ceil(keep_fraction * d)))


def _check_fraction(keep_fraction: float) -> None:
    if not 0.0 < keep_fraction <= 1.0:
        raise InvalidParameterError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")


def _emit(acc: np.ndarray, k: int) -> tuple[SparseUpdate, np.ndarray]:
    chosen = _top_k(acc, k)
    chosen = chosen[acc[chosen] != 0.0]
    sparse = SparseUpdate(chosen.astype(np.int64), acc[chosen].copy(), acc.size)
    return sparse, chosen


def graddrop_compress(g, state: CompressorState, keep_fraction: float) -> tuple[SparseUpdate, CompressorState]:
    """Top-k sparsification with residual accumulation (gradient dropping)."""
    _check_fraction(keep_fraction)
    g = as_param_vector(g)
    acc = state.residual + g
    sparse, chosen = _emit(acc, _k_for(keep_fraction, g.size))
    acc[chosen] = 0.0
    return sparse, CompressorState(acc, state.velocity, state.warmup_round + 1)


@dataclass(frozen=True)
class DgcConfig:
    keep_fraction: float = 0.04
    momentum: float = 0.9
    clip_norm: float = math.inf
    # keep fractions for the warm-up stages; each stage lasts warmup_stage_rounds
    warmup_schedule: tuple = (0.25, 0.0625, 0.015625)
    warmup_stage_rounds: int = 1

    def __post_init__(self):
        _check_fraction(self.keep_fraction)
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParameterError(f"DGC momentum must lie in [0, 1), got {self.momentum}")
        if not self.clip_norm > 0:
            raise InvalidParameterError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.warmup_stage_rounds < 1:
            raise InvalidParameterError("warmup_stage_rounds must be >= 1")
        for f in self.warmup_schedule:
            _check_fraction(f)


def dgc_keep_fraction(cfg: DgcConfig, warmup_round: int) -> float:
    """Keep fraction in effect at a given round; warm-up never drops below the target."""
    stage = warmup_round // cfg.warmup_stage_rounds
    if stage < len(cfg.warmup_schedule):
        return max(cfg.warmup_schedule[stage], cfg.keep_fraction)
    return cfg.keep_fraction


def dgc_compress(g, state: CompressorState, cfg: DgcConfig) -> tuple[SparseUpdate, CompressorState]:
    """Deep gradient compression step.

    Local clipping to ``clip_norm``, momentum correction ``u' = momentum*u + g``,
    accumulation ``v' = v + u'``, top-k on ``|v'|``, and momentum factor
    masking: emitted coordinates are cleared in both ``u'`` and ``v'``.
    """
    g = as_param_vector(g)
    norm = float(np.linalg.norm(g))
    if norm > cfg.clip_norm:
        g = g * (cfg.clip_norm / norm)
    u = cfg.momentum * state.velocity + g
    v = state.residual + u
    k = _k_for(dgc_keep_fraction(cfg, state.warmup_round), g.size)
    sparse, chosen = _emit(v, k)
    v[chosen] = 0.0
    u[chosen] = 0.0
    return sparse, CompressorState(v, u, state.warmup_round + 1)


# -- sparse wire format ------------------------------------------------------
# count k as 32 bits, then k pairs of (index in ceil(log2 d) bits, float64 bits)

def _index_bits(d: int) -> int:
    return level_bits(d)


def sparse_payload_bits(k: int, d: int) -> int:
    """Unpadded bit length of a sparse payload carrying ``k`` entries."""
    return 32 + k * (_index_bits(d) + 64)


def pack_sparse(u: SparseUpdate) -> bytes:
    k = u.indices.size
    w = _index_bits(u.dimension)
    value_words = np.ascontiguousarray(u.values, dtype="<f8").view("<u8")
    pair_bits = np.concatenate(
        [_field_bits(u.indices, w).reshape(k, w), _field_bits(value_words, 64).reshape(k, 64)], axis=1
    )
    bits = np.concatenate([_field_bits(np.array([k]), 32), pair_bits.reshape(-1)])
    return pack_bits(bits)


def unpack_sparse(data: bytes, d: int) -> SparseUpdate:
    if len(data) < 4:
        raise CorruptStreamError("sparse payload shorter than its count field")
    head = np.unpackbits(np.frombuffer(data[:4], dtype=np.uint8), bitorder="little")
    k = int(_fields_from_bits(head, 1, 32)[0])
    w = _index_bits(d)
    bits = unpack_bits(data, sparse_payload_bits(k, d))[32:].reshape(k, w + 64)
    idx = _fields_from_bits(bits[:, :w].reshape(-1), k, w).astype(np.int64)
    vals = _fields_from_bits(bits[:, w:].reshape(-1), k, 64).view(np.float64)
    try:
        return SparseUpdate(idx, vals.copy(), d)
    except InvalidInputError as exc:
        raise CorruptStreamError(str(exc)) from exc


# -- bandwidth ---------------------------------------------------------------

METHODS = (
    "d_lion_mavo",
    "d_lion_avg",
    "g_lion",
    "g_adamw",
    "d_signum_mavo",
    "d_signum_avg",
    "terngrad",
    "graddrop",
    "dgc",
)

_ALIASES = {"mavo": "d_lion_mavo", "avg": "d_lion_avg", "global": "g_lion"}


def _canonical(method: str) -> str:
    method = _ALIASES.get(method, method)
    if method not in METHODS:
        raise InvalidParameterError(f"unknown method {method!r}")
    return method


def canonical_keep_fraction(keep_fraction=None, drop_rate=None) -> float:
    """Resolve the two spellings of the sparsification rate to a keep fraction.

    A drop rate of 0.96 and a keep fraction of 0.04 describe the same setting.
    """
    if keep_fraction is not None and drop_rate is not None:
        if abs((1.0 - drop_rate) - keep_fraction) > 1e-12:
            raise InvalidParameterError("keep_fraction and drop_rate disagree")
    if keep_fraction is None:
        keep_fraction = 0.04 if drop_rate is None else float(Fraction(repr(1.0)) - Fraction(repr(drop_rate)))
    _check_fraction(keep_fraction)
    return float(keep_fraction)


def _ceil_fraction(x: Fraction) -> int:
    return -((-x.numerator) // x.denominator)


def _sparse_formula(keep_fraction: float, d: int) -> int:
    # (1 - eta) * 32d evaluated on the decimal value so 0.04 * 32000 is exactly 1280
    return _ceil_fraction(Fraction(repr(float(keep_fraction))) * 32 * d)


def bandwidth_of(method: str, d: int, n: int, keep_fraction: float = 0.04) -> tuple[int, int]:
    """Minimum per-worker (uplink, downlink) bits per round.

    Integer-exact form of the bandwidth table: level counts are rounded up to
    whole bits, so averaging needs ceil(log2(N + 1)) bits per coordinate.
    """
    method = _canonical(method)
    if d < 1 or n < 1:
        raise InvalidParameterError("d and N must be positive")
    if method in ("g_lion", "g_adamw"):
        return 32 * d, 32 * d
    if method == "terngrad":
        return _ceil_fraction(Fraction(3, 2) * d), level_bits(2 * n + 1) * d
    if method in ("dgc", "graddrop"):
        return _sparse_formula(keep_fraction, d), 32 * d
    if method in ("d_lion_avg", "d_signum_avg"):
        return d, level_bits(n + 1) * d
    return d, d


def formula_bandwidth(method: str, d: int, n: int, keep_fraction: float = 0.04) -> tuple[int, int]:
    """The table's formulas taken literally (log(n)d, log(2n+1)d), rounded up to whole bits."""
    method = _canonical(method)
    if method == "terngrad":
        return _ceil_fraction(Fraction(3, 2) * d), math.ceil(math.log2(2 * n + 1) * d)
    if method in ("d_lion_avg", "d_signum_avg"):
        return d, math.ceil(math.log2(n) * d)
    return bandwidth_of(method, d, n, keep_fraction)


def _bytes_bits(nbits: int) -> int:
    return 8 * ((nbits + 7) // 8)


def codec_bandwidth(
    method: str, d: int, n: int, keep_fraction: float = 0.04, codec: str = "one_bit"
) -> tuple[int, int]:
    """Per-worker (uplink, downlink) bits actually put on the wire by this package's codecs.

    Sizes include byte padding. For the sparsifiers the downlink value is the
    largest possible payload (union of all workers' index sets, capped at d).
    """
    method = _canonical(method)
    if codec not in ("one_bit", "ternary"):
        raise InvalidParameterError(f"unknown codec {codec!r}")
    sign_up = _bytes_bits(d if codec == "one_bit" else 2 * d)
    if method in ("g_lion", "g_adamw"):
        return 64 * d, 64 * d
    if method in ("d_lion_mavo", "d_signum_mavo"):
        return sign_up, sign_up
    if method in ("d_lion_avg", "d_signum_avg"):
        levels = n + 1 if codec == "one_bit" else 2 * n + 1
        return sign_up, _bytes_bits(level_bits(levels) * d)
    if method == "terngrad":
        # one float64 for scale sharing in each direction
        return 64 + _bytes_bits(2 * d), 64 + _bytes_bits(level_bits(2 * n + 1) * d)
    k = _k_for(keep_fraction, d)
    return _bytes_bits(sparse_payload_bits(k, d)), _bytes_bits(sparse_payload_bits(min(d, n * k), d))


@dataclass
class BandwidthLedger:
    """Per-round bit counts in both directions.

    ``up`` is the total over all workers, ``down`` the broadcast payload as seen
    by one worker. ``*_padding`` is the part of the byte-rounded count that is
    padding. The formula columns hold the bandwidth-table values in the same
    units (uplink summed over workers).
    """

    up: list = field(default_factory=list)
    down: list = field(default_factory=list)
    up_padding: list = field(default_factory=list)
    down_padding: list = field(default_factory=list)
    up_formula: list = field(default_factory=list)
    down_formula: list = field(default_factory=list)

    def record(self, up_payloads, down_payloads, up_raw_bits, down_raw_bits, formula):
        """Record one round from the actual payload byte strings.

        ``up_payloads`` / ``down_payloads`` are lists of messages; the raw bit
        counts are the unpadded lengths of the same messages.
        """
        up = 8 * sum(len(p) for p in up_payloads)
        down = 8 * sum(len(p) for p in down_payloads)
        self.up.append(up)
        self.down.append(down)
        self.up_padding.append(up - int(up_raw_bits))
        self.down_padding.append(down - int(down_raw_bits))
        self.up_formula.append(int(formula[0]))
        self.down_formula.append(int(formula[1]))
        return up, down

    @property
    def total_up(self) -> int:
        return int(sum(self.up))

    @property
    def total_down(self) -> int:
        return int(sum(self.down))

    def __len__(self):
        return len(self.up)
