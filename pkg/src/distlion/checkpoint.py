"""Versioned binary snapshots of a running simulation.

Layout::

    b"DLIONCKP"            8-byte magic
    version                1 byte (currently 1)
    header length          4 bytes, little-endian unsigned
    header                 UTF-8 JSON: round index, config, rng states, logs
    arrays                 an ``.npz`` archive with every array-valued state

Floats in the JSON header are written with ``repr`` precision, so a restored
run continues bit-identically.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .config import config_from_dict, config_to_dict
from .errors import CorruptStreamError
from .optimizers import AdamWState, LionState, SignumState

__all__ = ["MAGIC", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "dumps", "loads"]

MAGIC = b"DLIONCKP"
FORMAT_VERSION = 1


def _plain(obj):
    """Turn numpy scalars / arrays inside an rng state into JSON-able values."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": [int(v) for v in obj], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unplain(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _unplain(v) for k, v in obj.items()}
    return obj


def _state_arrays(prefix: str, state, arrays: dict) -> dict:
    if state is None:
        return {"kind": None}
    if isinstance(state, SignumState):
        arrays[f"{prefix}.momentum"] = state.momentum
        return {"kind": "signum", "beta": state.beta}
    if isinstance(state, LionState):
        arrays[f"{prefix}.momentum"] = state.momentum
        return {"kind": "lion"}
    if isinstance(state, AdamWState):
        arrays[f"{prefix}.first"] = state.first_moment
        arrays[f"{prefix}.second"] = state.second_moment
        return {"kind": "adamw", "step_count": state.step_count}
    raise TypeError(f"cannot checkpoint optimizer state {type(state).__name__}")


def _state_from(prefix: str, meta: dict, arrays):
    kind = meta["kind"]
    if kind is None:
        return None
    if kind == "signum":
        return SignumState(arrays[f"{prefix}.momentum"], meta["beta"])
    if kind == "lion":
        return LionState(arrays[f"{prefix}.momentum"])
    if kind == "adamw":
        return AdamWState(arrays[f"{prefix}.first"], arrays[f"{prefix}.second"], meta["step_count"])
    raise CorruptStreamError(f"unknown optimizer state kind {kind!r}")


def dumps(sim) -> bytes:
    """Serialize a :class:`~distlion.dist_sim.Simulation` to bytes."""
    arrays = {"x": sim.cohort.x}
    cohort = sim.cohort
    comps = None
    if cohort.compressors is not None:
        arrays["compressor.residual"] = np.stack([c.residual for c in cohort.compressors])
        arrays["compressor.velocity"] = np.stack([c.velocity for c in cohort.compressors])
        comps = [c.warmup_round for c in cohort.compressors]
    if sim.trajectory is not None:
        arrays["trajectory"] = np.stack(sim.trajectory)
    header = {
        "round": sim.t,
        "config": config_to_dict(sim.cfg),
        "stopped_early": sim.stopped_early,
        "rng_states": [_plain(r.bit_generator.state) for r in cohort.rngs],
        "worker_state": _state_arrays("worker", cohort.opt_state, arrays),
        "server_state": _state_arrays("server", sim.server.opt_state, arrays),
        "compressor_warmup": comps,
        "ledger": asdict(sim.ledger),
        "lrs": sim.lrs,
        "rounds": [asdict(r) for r in sim.rounds],
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob = io.BytesIO()
    np.savez(blob, **arrays)
    return MAGIC + bytes([FORMAT_VERSION]) + struct.pack("<I", len(head)) + head + blob.getvalue()


def loads(data: bytes, oracle=None):
    """Rebuild a Simulation from :func:`dumps` output.

    Pass ``oracle`` when the original run used a custom objective; otherwise it
    is rebuilt from the stored problem description.
    """
    from .dist_sim import RoundLog, ServerState, Simulation

    if data[:8] != MAGIC:
        raise CorruptStreamError("not a distlion checkpoint (bad magic)")
    if len(data) < 13:
        raise CorruptStreamError("truncated checkpoint")
    if data[8] != FORMAT_VERSION:
        raise CorruptStreamError(f"unsupported checkpoint version {data[8]}")
    (hlen,) = struct.unpack("<I", data[9:13])
    if len(data) < 13 + hlen:
        raise CorruptStreamError("truncated checkpoint")
    try:
        header = json.loads(data[13 : 13 + hlen].decode("utf-8"))
        arrays = dict(np.load(io.BytesIO(data[13 + hlen :]), allow_pickle=False))
    except (ValueError, OSError) as exc:
        raise CorruptStreamError(f"unreadable checkpoint: {exc}") from None

    cfg, _ = config_from_dict(header["config"])
    sim = Simulation(cfg, oracle, arrays["x"][0])
    cohort = sim.cohort
    cohort.x = arrays["x"]
    cohort.opt_state = _state_from("worker", header["worker_state"], arrays)
    for rng, state in zip(cohort.rngs, header["rng_states"]):
        rng.bit_generator.state = _unplain(state)
    if header["compressor_warmup"] is not None:
        cohort.compressors = [
            agg.CompressorState(res, vel, w)
            for res, vel, w in zip(
                arrays["compressor.residual"], arrays["compressor.velocity"], header["compressor_warmup"]
            )
        ]
    sim.server = ServerState(_state_from("server", header["server_state"], arrays))
    sim.ledger = agg.BandwidthLedger(**header["ledger"])
    sim.lrs = list(header["lrs"])
    sim.rounds = [RoundLog(**r) for r in header["rounds"]]
    sim.t = header["round"]
    sim.stopped_early = header["stopped_early"]
    if "trajectory" in arrays:
        sim.trajectory = list(arrays["trajectory"])
    return sim


def save_checkpoint(sim, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(sim))
    tmp.replace(path)
    return path


def load_checkpoint(path, oracle=None):
    return loads(Path(path).read_bytes(), oracle)
