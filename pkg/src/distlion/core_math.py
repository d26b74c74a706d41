"""Vectors, the ternary sign map, feasibility distance and the bit-exact codecs.

Parameter vectors are flat ``float64`` numpy arrays. Sign updates are ``int8``
arrays with entries in {-1, 0, +1}. All packers use the same layout: a stream
of fixed-width little-endian fields, coordinate ``k`` occupying bits
``[k*w, (k+1)*w)`` of the stream, and the stream filled into bytes LSB-first.
Padding bits in the final byte are zero and decoders reject anything else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptStreamError, InvalidInputError, InvalidParameterError

__all__ = [
    "Hyperparams",
    "SumVector",
    "as_param_vector",
    "sign",
    "dist_to_feasible",
    "in_feasible_set",
    "level_bits",
    "pack_bits",
    "unpack_bits",
    "pack_binary",
    "unpack_binary",
    "pack_ternary",
    "unpack_ternary",
    "pack_binary_rows",
    "unpack_binary_rows",
    "pack_ternary_rows",
    "unpack_ternary_rows",
    "sum_updates",
    "pack_sum",
    "unpack_sum",
    "pack_sum_ternary",
    "unpack_sum_ternary",
    "pack_reals",
    "unpack_reals",
]


@dataclass(frozen=True)
class Hyperparams:
    """Lion-style hyperparameters: momentum coefficients, step size and weight decay."""

    beta1: float = 0.9
    beta2: float = 0.99
    lr: float = 5e-5
    weight_decay: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0:
            raise InvalidParameterError(f"beta1 must lie in (0, 1), got {self.beta1}")
        if not 0.0 < self.beta2 < 1.0:
            raise InvalidParameterError(f"beta2 must lie in (0, 1), got {self.beta2}")
        if not self.lr > 0.0:
            raise InvalidParameterError(f"lr must be positive, got {self.lr}")
        if not self.weight_decay >= 0.0:
            raise InvalidParameterError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not self.lr * self.weight_decay < 1.0:
            raise InvalidParameterError("lr * weight_decay must be < 1")

    def with_lr(self, lr: float) -> "Hyperparams":
        return Hyperparams(self.beta1, self.beta2, lr, self.weight_decay)


@dataclass(frozen=True)
class SumVector:
    """Integer coordinatewise sum of ``worker_count`` sign updates."""

    values: np.ndarray
    worker_count: int

    def __post_init__(self):
        if self.worker_count < 1:
            raise InvalidInputError("worker_count must be positive")
        if self.values.size and np.abs(self.values).max() > self.worker_count:
            raise InvalidInputError("sum entry exceeds worker count in magnitude")


def as_param_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"expected a flat vector, got shape {arr.shape}")
    return arr


def _check_finite(v: np.ndarray) -> None:
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("vector contains non-finite entries")


def sign(v) -> np.ndarray:
    """Ternary sign with sign(0) = 0, returned as int8."""
    arr = as_param_vector(v)
    _check_finite(arr)
    return np.sign(arr).astype(np.int8)


def dist_to_feasible(x, lam: float, norm: str = "l2") -> float:
    """Distance from ``x`` to the box {z : ||lam * z||_inf <= 1}.

    The box projection is the nearest point in both l2 and l-infinity, so the
    residual is the componentwise excess ``max(|x| - 1/lam, 0)``.
    """
    if not lam > 0:
        raise InvalidParameterError(f"lambda must be positive, got {lam}")
    arr = as_param_vector(x)
    excess = np.maximum(np.abs(arr) - 1.0 / lam, 0.0)
    # membership is decided by the lam*x test; keep the distance consistent with it
    inside = np.abs(lam * arr) <= 1.0
    excess[inside] = 0.0
    excess[~inside & (excess == 0.0)] = np.nextafter(0.0, 1.0)
    if norm == "l2":
        return float(np.linalg.norm(excess))
    if norm == "linf":
        return float(excess.max()) if excess.size else 0.0
    raise InvalidParameterError(f"unknown norm {norm!r}")


def in_feasible_set(x, lam: float) -> bool:
    arr = as_param_vector(x)
    return bool(np.all(np.abs(lam * arr) <= 1.0))


def level_bits(levels: int) -> int:
    """Bits needed to address ``levels`` distinct values, i.e. ceil(log2(levels))."""
    if levels < 1:
        raise InvalidParameterError("levels must be positive")
    return (levels - 1).bit_length()


# -- generic fixed-width packing --------------------------------------------

def _field_bits(values: np.ndarray, width: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.uint64).reshape(-1)
    if width == 0:
        return np.zeros(0, dtype=np.uint8)
    shifts = np.arange(width, dtype=np.uint64)
    return ((v[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1)


def pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def unpack_bits(data: bytes, nbits: int) -> np.ndarray:
    expected = (nbits + 7) // 8
    if len(data) != expected:
        raise CorruptStreamError(f"expected {expected} bytes for {nbits} bits, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[nbits:].any():
        raise CorruptStreamError("nonzero padding bits")
    return bits[:nbits]


def _fields_from_bits(bits: np.ndarray, count: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.uint64)
    b = bits.reshape(count, width).astype(np.uint64)
    return (b << np.arange(width, dtype=np.uint64)).sum(axis=1, dtype=np.uint64)


def pack_fixed_width(values, width: int) -> bytes:
    v = np.asarray(values, dtype=np.uint64).reshape(-1)
    if width < 64 and v.size and int(v.max()) >> width:
        raise InvalidInputError(f"value does not fit in {width} bits")
    return pack_bits(_field_bits(v, width))


def unpack_fixed_width(data: bytes, count: int, width: int) -> np.ndarray:
    return _fields_from_bits(unpack_bits(data, count * width), count, width)


# -- sign-update codecs ------------------------------------------------------

def _as_sign_update(u, ndim: int = 1) -> np.ndarray:
    arr = np.asarray(u)
    if arr.ndim != ndim:
        raise InvalidInputError(f"sign update must have {ndim} dimension(s)")
    if arr.size and (arr.min() < -1 or arr.max() > 1 or (arr.dtype.kind == "f" and (arr != np.round(arr)).any())):
        raise InvalidInputError("sign update entries must lie in {-1, 0, +1}")
    return arr.astype(np.int8, copy=False)


def pack_binary(u) -> bytes:
    """One bit per coordinate: +1 -> 1, -1 -> 0, and the tie value 0 -> 1 (lossy)."""
    arr = _as_sign_update(u)
    return np.packbits(arr >= 0, bitorder="little").tobytes()


def unpack_binary(data: bytes, d: int) -> np.ndarray:
    bits = unpack_bits(data, d)
    return (2 * bits.astype(np.int8) - 1).astype(np.int8)


_TERNARY_CODE = np.array([2, 0, 1], dtype=np.uint64)  # indexed by u + 1


def pack_ternary(u) -> bytes:
    """Two bits per coordinate: -1 -> 0b10, 0 -> 0b00, +1 -> 0b01. Lossless."""
    arr = _as_sign_update(u)
    return pack_fixed_width(_TERNARY_CODE[arr + 1], 2)


def unpack_ternary(data: bytes, d: int) -> np.ndarray:
    codes = unpack_fixed_width(data, d, 2)
    if (codes == 3).any():
        raise CorruptStreamError("reserved ternary code 0b11 in stream")
    out = np.zeros(d, dtype=np.int8)
    out[codes == 1] = 1
    out[codes == 2] = -1
    return out


# Row variants: one payload per row of a (workers, d) array, byte-identical to
# calling the single-vector codec on each row.

def _unpack_rows(payloads, nbits: int) -> np.ndarray:
    nbytes = (nbits + 7) // 8
    for p in payloads:
        if len(p) != nbytes:
            raise CorruptStreamError(f"expected {nbytes} bytes for {nbits} bits, got {len(p)}")
    buf = np.frombuffer(b"".join(payloads), dtype=np.uint8).reshape(len(payloads), nbytes)
    bits = np.unpackbits(buf, axis=1, bitorder="little")
    if bits[:, nbits:].any():
        raise CorruptStreamError("nonzero padding bits")
    return bits[:, :nbits]


def pack_binary_rows(rows) -> list:
    arr = _as_sign_update(rows, ndim=2)
    return [r.tobytes() for r in np.packbits(arr >= 0, axis=1, bitorder="little")]


def unpack_binary_rows(payloads, d: int) -> np.ndarray:
    return (2 * _unpack_rows(payloads, d).astype(np.int8) - 1).astype(np.int8)


def pack_ternary_rows(rows) -> list:
    arr = _as_sign_update(rows, ndim=2)
    n, d = arr.shape
    bits = _field_bits(_TERNARY_CODE[arr + 1], 2).reshape(n, 2 * d)
    return [r.tobytes() for r in np.packbits(bits, axis=1, bitorder="little")]


def unpack_ternary_rows(payloads, d: int) -> np.ndarray:
    bits = _unpack_rows(payloads, 2 * d).reshape(len(payloads), d, 2).astype(np.int8)
    codes = bits[:, :, 0] + 2 * bits[:, :, 1]
    if (codes == 3).any():
        raise CorruptStreamError("reserved ternary code 0b11 in stream")
    return np.where(codes == 2, -1, codes).astype(np.int8)


# -- aggregated-sum codecs ---------------------------------------------------

def sum_updates(deltas) -> SumVector:
    """Exact integer sum of a nonempty list of equal-length sign updates."""
    deltas = list(deltas)
    if not deltas:
        raise InvalidInputError("cannot sum an empty list of updates")
    try:
        stacked = np.asarray(deltas)
    except ValueError:
        stacked = None
    if stacked is None or stacked.ndim != 2 or stacked.dtype == object:
        raise InvalidInputError("sign updates have different lengths")
    return SumVector(stacked.sum(axis=0, dtype=np.int64), len(deltas))


def pack_sum(s: SumVector) -> bytes:
    """Level index (s + N) / 2 in ceil(log2(N + 1)) bits per coordinate.

    Only valid for sums of strictly binary updates, whose entries share the
    parity of N.
    """
    n = s.worker_count
    vals = np.asarray(s.values, dtype=np.int64)
    if ((vals + n) % 2).any():
        raise InvalidInputError("sum parity differs from worker count; use pack_sum_ternary")
    return pack_fixed_width((vals + n) // 2, level_bits(n + 1))


def unpack_sum(data: bytes, d: int, n: int) -> SumVector:
    idx = unpack_fixed_width(data, d, level_bits(n + 1)).astype(np.int64)
    if (idx > n).any():
        raise CorruptStreamError("level index exceeds worker count")
    return SumVector(2 * idx - n, n)


def pack_sum_ternary(s: SumVector) -> bytes:
    """Offset value s + N in ceil(log2(2N + 1)) bits, for sums that may contain zeros."""
    n = s.worker_count
    return pack_fixed_width(np.asarray(s.values, dtype=np.int64) + n, level_bits(2 * n + 1))


def unpack_sum_ternary(data: bytes, d: int, n: int) -> SumVector:
    idx = unpack_fixed_width(data, d, level_bits(2 * n + 1)).astype(np.int64)
    if (idx > 2 * n).any():
        raise CorruptStreamError("offset value exceeds 2N")
    return SumVector(idx - n, n)


def pack_reals(v) -> bytes:
    """Full-precision little-endian float64 payload."""
    return as_param_vector(v).astype("<f8").tobytes()


def unpack_reals(data: bytes, d: int) -> np.ndarray:
    if len(data) != 8 * d:
        raise CorruptStreamError(f"expected {8 * d} bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f8").astype(np.float64)
