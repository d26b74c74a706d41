"""Independent reference implementations used as test oracles.

Everything here is written with plain Python integers, floats and Fractions,
one coordinate at a time, and shares no code with the package under test.
"""

from __future__ import annotations

import math
from fractions import Fraction


# -- bit packing -------------------------------------------------------------

def pack_fields(fields, width):
    """LSB-first packing of unsigned integers, each ``width`` bits wide."""
    out = bytearray()
    acc = nbits = 0
    for value in fields:
        assert 0 <= value < (1 << width)
        acc |= value << nbits
        nbits += width
        while nbits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nbits -= 8
    if nbits:
        out.append(acc & 0xFF)
    return bytes(out)


def unpack_fields(data, count, width):
    acc = int.from_bytes(data, "little")
    return [(acc >> (i * width)) & ((1 << width) - 1) for i in range(count)]


def ceil_log2(n):
    """Smallest b with 2**b >= n."""
    b = 0
    while (1 << b) < n:
        b += 1
    return b


def pack_binary(u):
    return pack_fields([0 if v < 0 else 1 for v in u], 1)


def pack_ternary(u):
    return pack_fields([{-1: 2, 0: 0, 1: 1}[int(v)] for v in u], 2)


def pack_sum(values, n):
    return pack_fields([(int(s) + n) // 2 for s in values], ceil_log2(n + 1))


def pack_sum_ternary(values, n):
    return pack_fields([int(s) + n for s in values], ceil_log2(2 * n + 1))


def pack_sparse(indices, values, d):
    import struct

    w = ceil_log2(d)
    acc = len(indices)
    pos = 32
    for i, v in zip(indices, values):
        acc |= int(i) << pos
        pos += w
        acc |= struct.unpack("<Q", struct.pack("<d", float(v)))[0] << pos
        pos += 64
    return acc.to_bytes((pos + 7) // 8, "little")


# -- scalar optimizer references ---------------------------------------------

def sign(v):
    return (v > 0) - (v < 0)


def lion_step(m, g, beta1, beta2):
    """Per-coordinate (delta, new momentum)."""
    delta = [sign(beta1 * mi + (1.0 - beta1) * gi) for mi, gi in zip(m, g)]
    new_m = [beta2 * mi + (1.0 - beta2) * gi for mi, gi in zip(m, g)]
    return delta, new_m


def apply_update(x, delta, lr, wd):
    return [xi - lr * (di + wd * xi) for xi, di in zip(x, delta)]


def adamw_scalar(x, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Run AdamW on a scalar parameter through the gradient sequence ``grads``."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * (mh / (math.sqrt(vh) + eps) + wd * x)
    return x


# -- geometry ----------------------------------------------------------------

def dist_to_box(x, lam, norm="l2"):
    """Distance from x to its projection onto |x_k| <= 1/lam, by explicit clipping."""
    r = 1.0 / lam
    diff = [xi - min(max(xi, -r), r) for xi in x]
    if norm == "l2":
        return math.sqrt(sum(t * t for t in diff))
    return max((abs(t) for t in diff), default=0.0)


def kkt_exact(g, x, lam):
    """The KKT score evaluated in exact rational arithmetic."""
    total = Fraction(0)
    for gi, xi in zip(g, x):
        total += Fraction(gi) * (sign(gi) + Fraction(lam) * Fraction(xi))
    return total


# -- bandwidth table, typed from the reference table --------------------------

def table_bandwidth(method, d, n, eta=0.96):
    """(worker->server, server->worker) bits with log read as log2 and rounded up."""
    if method in ("g_lion", "g_adamw"):
        return 32 * d, 32 * d
    if method == "terngrad":
        return math.ceil(1.5 * d), math.ceil(math.log2(2 * n + 1) * d)
    if method == "dgc":
        return math.ceil((1 - Fraction(str(eta))) * 32 * d), 32 * d
    if method == "d_lion_avg":
        return d, math.ceil(math.log2(n) * d)
    if method == "d_lion_mavo":
        return d, d
    raise KeyError(method)


# -- a small distributed Lion loop ------------------------------------------

def reference_dlion(curv, x_star, sigma, x0, workers, rounds, lr, wd, rngs, mode, batch=1,
                    beta1=0.9, beta2=0.99):
    """Distributed Lion on a diagonal noisy quadratic, coordinate by coordinate.

    ``rngs`` supplies one generator per worker; each worker draws one standard
    normal vector of length d per round for its gradient noise.
    Returns the list of iterates x_0 .. x_T.
    """
    d = len(x0)
    x = list(x0)
    ms = [[0.0] * d for _ in range(workers)]
    traj = [list(x)]
    noise_scale = sigma / math.sqrt(batch)
    for _ in range(rounds):
        deltas = []
        for i in range(workers):
            noise = rngs[i].standard_normal(d).tolist()
            g = [curv[k] * (x[k] - x_star[k]) + noise_scale * noise[k] for k in range(d)]
            delta, ms[i] = lion_step(ms[i], g, beta1, beta2)
            # a tie-free one-bit wire maps a zero update to +1
            deltas.append([1 if v == 0 else v for v in delta])
        sums = [sum(dl[k] for dl in deltas) for k in range(d)]
        if mode == "mavo":
            upd = [1 if s >= 0 else -1 for s in sums]  # the 1-bit broadcast sends ties as +1
        else:
            upd = [s / workers for s in sums]
        x = apply_update(x, upd, lr, wd)
        traj.append(list(x))
    return traj
