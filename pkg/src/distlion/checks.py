"""Invariant check suites with pinned seeds.

Each suite returns a :class:`CheckResult`; ``witness`` holds the first
counterexample when a property fails. :func:`run_suites` backs the
``distlion check`` command.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import aggregation as agg
from . import core_math as cm
from .checkpoint import dumps, loads
from .config import ProblemSpec, RunConfig
from .dist_sim import Simulation, run_training
from .metrics import CONTRACTION_TOL, NONNEG_TOL, kkt_score, phase1_report
from .problems import (
    LogisticProblem,
    MlpProblem,
    QuadraticProblem,
    finite_diff_grad,
    generate_blobs,
    generate_two_class,
    logistic_grad,
    mlp_grad,
)

__all__ = ["CheckResult", "SUITES", "run_suites"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    witness: object = None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _fail(name, witness, **details):
    return CheckResult(name, False, details, witness)


# -- suites ------------------------------------------------------------------

def contraction() -> CheckResult:
    """Distance to the box shrinks by at least (1 - lr*lambda) per round, and F is absorbing."""
    d, lam, lr = 50, 0.1, 0.1
    # every coordinate outside the box by 10/sqrt(d): l2 distance 10
    x0 = np.full(d, 1.0 / lam + 10.0 / math.sqrt(d))
    cases = {
        # optimum inside the box: the sign update points inwards
        "inward": QuadraticProblem.random(7, d, sigma=1.0),
        # optimum far outside: the update pushes outwards and only decay contracts
        "outward": QuadraticProblem.diagonal(np.ones(d), np.full(d, 30.0), sigma=1.0),
    }
    details = {"initial_dist_l2": cm.dist_to_feasible(x0, lam, "l2")}
    for label, oracle in cases.items():
        for method in ("d_lion_mavo", "d_lion_avg"):
            cfg = RunConfig(method=method, workers=4, rounds=300, lr=lr, weight_decay=lam,
                            record_trajectory=True, problem=ProblemSpec(dim=d))
            run = run_training(cfg, oracle, x0)
            rep = phase1_report(run.trajectory, cfg.hyperparams())
            key = f"{label}/{method}"
            finite = np.concatenate([rep.ratios_l2[~np.isnan(rep.ratios_l2)], rep.ratios_linf[~np.isnan(rep.ratios_linf)]])
            details[key] = {
                "max_ratio": float(finite.max()) if finite.size else None,
                "entry_round": rep.entry_round,
            }
            if rep.violations:
                return _fail("contraction", {"case": key, "violation": rep.violations[0]}, **details)
            if rep.left_box:
                return _fail("contraction", {"case": key, "left_box_at": rep.left_box[0]}, **details)
    details["bound"] = 1.0 - lr * lam + CONTRACTION_TOL
    return CheckResult("contraction", True, details)


def equivalence() -> CheckResult:
    """N=1: both aggregations and global Lion give the same trajectory; N=4: the two global forms agree."""
    base = RunConfig(workers=1, rounds=100, lr=0.01, weight_decay=0.05, record_trajectory=True,
                     problem=ProblemSpec(quadratic_form="random", sigma=1.0))
    runs = {m: run_training(base.replace(method=m)) for m in ("d_lion_mavo", "d_lion_avg", "g_lion")}
    ref = np.stack(runs["d_lion_mavo"].trajectory)
    for m in ("d_lion_avg", "g_lion"):
        other = np.stack(runs[m].trajectory)
        if not np.array_equal(ref, other):
            t = int(np.argmax(~(ref == other).all(axis=1)))
            return _fail("equivalence", {"scheme": m, "first_difference_round": t})
    four = base.replace(method="g_lion", workers=4)
    a = np.stack(run_training(four).trajectory)
    b = np.stack(run_training(four.replace(global_form="averaged_momenta")).trajectory)
    if not np.array_equal(a, b):
        t = int(np.argmax(~(a == b).all(axis=1)))
        return _fail("equivalence", {"scheme": "averaged_momenta", "first_difference_round": t})
    return CheckResult("equivalence", True, {"rounds": 100, "single_worker_schemes": 3, "global_forms": 2})


def aggregation_relation(samples: int = 10_000) -> CheckResult:
    """Majority vote equals the sign of the average, and both stay in [-1, 1]."""
    rng = np.random.default_rng(11)
    for s in range(samples):
        n = (2, 3, 5, 8, 16)[s % 5]
        d = int(rng.integers(1, 33))
        deltas = [rng.integers(-1, 2, size=d).astype(np.int8) for _ in range(n)]
        if s % 2:  # strictly binary workers
            deltas = [np.where(u == 0, 1, u).astype(np.int8) for u in deltas]
        avg = agg.aggregate_avg(deltas).values
        mavo = agg.aggregate_majority(deltas).values
        if not np.array_equal(mavo, np.sign(avg)) or np.abs(avg).max() > 1 or np.abs(mavo).max() > 1:
            return _fail("aggregation", {"sample": s, "deltas": [u.tolist() for u in deltas]})
    return CheckResult("aggregation", True, {"samples": samples})


def kkt(samples: int = 100_000) -> CheckResult:
    """KKT score is nonnegative inside the box and exactly zero at constructed KKT points."""
    rng = np.random.default_rng(12)
    d = 8
    lam = 0.25
    lo = np.inf
    batch = 10_000
    for start in range(0, samples, batch):
        g = rng.standard_normal((batch, d)) * rng.choice([1e-3, 1.0, 1e3], size=(batch, 1))
        x = rng.uniform(-1.0, 1.0, (batch, d)) / lam
        # include exact boundary points
        edge = rng.random((batch, d)) < 0.2
        x[edge] = np.sign(x[edge]) / lam
        scores = np.sum(g * (np.sign(g) + lam * x), axis=1)
        lo = min(lo, float(scores.min()))
        if scores.min() < -NONNEG_TOL:
            i = int(np.argmin(scores))
            return _fail("kkt", {"x": x[i].tolist(), "grad": g[i].tolist(), "score": float(scores[i])})
    zeros = {}
    for name, lam_z in (("boundary", 0.5), ("boundary_quarter", 0.25), ("interior", 0.1), ("mixed", 0.125)):
        g = rng.standard_normal(d)
        if name.startswith("boundary"):
            x = -np.sign(g) / lam_z
        elif name == "interior":
            x, g = rng.uniform(-1, 1, d) / lam_z, np.zeros(d)
        else:
            x = -np.sign(g) / lam_z
            free = np.arange(d) % 2 == 0
            g[free] = 0.0
            x[free] = rng.uniform(-1, 1, free.sum()) / lam_z
        zeros[name] = kkt_score(g, x, lam_z)
        if zeros[name] != 0.0:
            return _fail("kkt", {"point": name, "score": zeros[name]})
    return CheckResult("kkt", True, {"samples": samples, "min_score": lo, "zero_points": zeros})


def unbiasedness(draws: int = 100_000) -> CheckResult:
    """TernGrad's decompressed estimate has mean g, within 3 standard errors per coordinate."""
    rng = np.random.default_rng(13)
    g = np.array([0.7, -0.3, 0.05, -1.2, 0.0, 0.9, -0.01, 0.45])
    total = np.zeros(g.size)
    for _ in range(draws):
        s, t = agg.terngrad_compress(g, rng)
        total += agg.terngrad_decompress(s, t)
    mean = total / draws
    scale = np.abs(g).max()
    se = np.sqrt(np.maximum(scale * np.abs(g) - g * g, 0.0) / draws)
    err = np.abs(mean - g)
    # the second term covers float rounding in the running sum
    bad = np.flatnonzero(err > 3 * se + draws * np.finfo(float).eps * np.abs(g))
    details = {"draws": draws, "max_z": float(np.max(np.where(se > 0, err / np.where(se > 0, se, 1), 0)))}
    if bad.size:
        k = int(bad[0])
        return _fail("unbiasedness", {"coordinate": k, "mean": float(mean[k]), "target": float(g[k]),
                                      "se": float(se[k])}, **details)
    return CheckResult("unbiasedness", True, details)


def _rel_err(a, b) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(instances: int = 20, tol: float = 1e-5) -> CheckResult:
    """Analytic logistic and MLP gradients against central differences."""
    worst = {"logistic": 0.0, "mlp": 0.0}
    for i in range(instances):
        rng = np.random.default_rng(100 + i)
        d = int(rng.integers(2, 40))
        data = generate_two_class(i, 60, d, 2.0)
        prob = LogisticProblem(data, reg=float(rng.uniform(0, 0.1)))
        w = rng.standard_normal(d) * 0.5
        batch = rng.integers(0, len(data), size=16)
        analytic = logistic_grad(prob, w, batch)[1]
        numeric = finite_diff_grad(lambda v: logistic_grad(prob, v, batch)[0], w)
        err = _rel_err(analytic, numeric)
        worst["logistic"] = max(worst["logistic"], err)
        if err > tol:
            return _fail("gradcheck", {"model": "logistic", "instance": i, "rel_err": err}, worst=worst)

        inp, hidden, classes = int(rng.integers(2, 8)), int(rng.integers(2, 10)), int(rng.integers(2, 5))
        mdata = generate_blobs(i, 40, inp, classes)
        mlp = MlpProblem(mdata, hidden, classes)
        params = mlp.init_params(rng)
        mb = rng.integers(0, len(mdata), size=12)
        analytic = mlp_grad(mlp, params, mb)[1]
        numeric = finite_diff_grad(lambda v: mlp_grad(mlp, v, mb)[0], params)
        err = _rel_err(analytic, numeric)
        worst["mlp"] = max(worst["mlp"], err)
        if err > tol or params.size > 200:
            return _fail("gradcheck", {"model": "mlp", "instance": i, "rel_err": err, "d": params.size},
                         worst=worst)
    return CheckResult("gradcheck", True, {"instances": instances, "worst_rel_err": worst})


GOLDEN = (
    ("binary", [1, -1, 1], b"\x05"),
    ("binary", [-1] * 8, b"\x00"),
    ("binary", [], b""),
    ("ternary", [1, 0, -1], b"\x21"),
    ("ternary", [], b""),
    ("sum", ([3, -1], 3), b"\x07"),
    ("sum", ([1], 1), b"\x01"),
)


def codecs() -> CheckResult:
    """Golden bytes for every codec plus randomized round trips."""
    for kind, value, expected in GOLDEN:
        if kind == "binary":
            got = cm.pack_binary(np.array(value, dtype=np.int8))
        elif kind == "ternary":
            got = cm.pack_ternary(np.array(value, dtype=np.int8))
        else:
            vals, n = value
            got = cm.pack_sum(cm.SumVector(np.array(vals), n))
        if got != expected:
            return _fail("codecs", {"codec": kind, "input": value, "expected": expected.hex(), "got": got.hex()})
    rng = np.random.default_rng(14)
    for trial in range(1000):
        d = int(rng.integers(0, 70))
        u = rng.integers(-1, 2, size=d).astype(np.int8)
        if not np.array_equal(cm.unpack_ternary(cm.pack_ternary(u), d), u):
            return _fail("codecs", {"codec": "ternary", "trial": trial, "input": u.tolist()})
        b = np.where(u == 0, 1, u).astype(np.int8)
        if not np.array_equal(cm.unpack_binary(cm.pack_binary(b), d), b):
            return _fail("codecs", {"codec": "binary", "trial": trial, "input": b.tolist()})
        n = int(rng.integers(1, 40))
        s = cm.sum_updates([np.where(rng.random(d) < 0.5, 1, -1).astype(np.int8) for _ in range(n)])
        if not np.array_equal(cm.unpack_sum(cm.pack_sum(s), d, n).values, s.values):
            return _fail("codecs", {"codec": "sum", "trial": trial, "n": n})
        st = cm.sum_updates([rng.integers(-1, 2, size=d).astype(np.int8) for _ in range(n)])
        if not np.array_equal(cm.unpack_sum_ternary(cm.pack_sum_ternary(st), d, n).values, st.values):
            return _fail("codecs", {"codec": "sum_ternary", "trial": trial, "n": n})
        if d == 0:
            continue
        sp = agg.SparseUpdate.from_dense(np.where(rng.random(d) < 0.2, rng.standard_normal(d), 0.0))
        back = agg.unpack_sparse(agg.pack_sparse(sp), d)
        if not (np.array_equal(back.indices, sp.indices) and np.array_equal(back.values, sp.values)):
            return _fail("codecs", {"codec": "sparse", "trial": trial})
    return CheckResult("codecs", True, {"golden": len(GOLDEN), "round_trips": 1000})


def conservation(rounds: int = 100) -> CheckResult:
    """Sparsifier bookkeeping: what was emitted plus what is held equals what came in."""
    rng = np.random.default_rng(15)
    d = 50
    details = {}
    gd_state = agg.CompressorState.zeros(d)
    dgc_cfg = agg.DgcConfig(keep_fraction=0.04, momentum=0.9, clip_norm=5.0)
    dgc_state = agg.CompressorState.zeros(d)
    dgc0_cfg = agg.DgcConfig(keep_fraction=0.04, momentum=0.0, warmup_schedule=())
    dgc0_state = agg.CompressorState.zeros(d)
    gd_in, gd_out, dgc_in, dgc_out = np.zeros(d), np.zeros(d), np.zeros(d), np.zeros(d)
    for t in range(rounds):
        g = rng.standard_normal(d) * rng.uniform(0.1, 10.0)
        gd_in += g
        sp, gd_state = agg.graddrop_compress(g, gd_state, 0.04)
        gd_out += sp.to_dense()
        sp0, dgc0_state = agg.dgc_compress(g, dgc0_state, dgc0_cfg)
        if not (np.array_equal(sp0.indices, sp.indices) and np.array_equal(sp0.values, sp.values)):
            return _fail("conservation", {"case": "dgc_momentum_0_vs_graddrop", "round": t})
        # the DGC input of a round is the momentum-corrected gradient u_t
        norm = np.linalg.norm(g)
        clipped = g * (dgc_cfg.clip_norm / norm) if norm > dgc_cfg.clip_norm else g
        u = dgc_cfg.momentum * dgc_state.velocity + clipped
        dgc_in += u
        spd, dgc_state = agg.dgc_compress(g, dgc_state, dgc_cfg)
        dgc_out += spd.to_dense()
        for name, inp, out, held in (("graddrop", gd_in, gd_out, gd_state.residual),
                                     ("dgc", dgc_in, dgc_out, dgc_state.residual)):
            err = float(np.abs(out + held - inp).max() / max(np.abs(inp).max(), 1e-300))
            details[f"{name}_rel_err"] = max(details.get(f"{name}_rel_err", 0.0), err)
            if err > 1e-12:
                return _fail("conservation", {"case": name, "round": t, "rel_err": err}, **details)
    details["rounds"] = rounds
    return CheckResult("conservation", True, details)


def determinism() -> CheckResult:
    """Repeat runs, checkpoint/resume and threaded runs all give the same CSV."""
    problems = {
        "quadratic": ProblemSpec(quadratic_form="random", sigma=1.0),
        "logistic": ProblemSpec(kind="logistic", dim=10, n_samples=400),
    }
    for label, problem in problems.items():
        for method in ("d_lion_mavo", "d_lion_avg", "g_adamw", "terngrad", "dgc"):
            cfg = RunConfig(method=method, workers=4, rounds=60, lr=0.01, problem=problem)
            first = run_training(cfg).to_csv()
            if run_training(cfg).to_csv() != first:
                return _fail("determinism", {"case": "repeat", "problem": label, "method": method})
            sim = Simulation(cfg)
            sim.run(until=cfg.rounds // 2)
            resumed = loads(dumps(sim)).run().to_csv()
            if resumed != first:
                return _fail("determinism", {"case": "resume", "problem": label, "method": method})
            if run_training(cfg.replace(threads=4)).to_csv() != first:
                return _fail("determinism", {"case": "threads", "problem": label, "method": method})
    return CheckResult("determinism", True, {"problems": list(problems), "rounds": 60})


_TABLE_METHODS = ("g_lion", "terngrad", "dgc", "d_lion_avg", "d_lion_mavo")


def bandwidth() -> CheckResult:
    """Live ledger counts equal the codec sizes, and the formula column matches the table."""
    details = {}
    for method in agg.METHODS:
        for n in (1, 3, 16):
            cfg = RunConfig(method=method, workers=n, rounds=5, lr=0.01, problem=ProblemSpec(dim=37))
            run = run_training(cfg)
            for t in range(len(run.ledger)):
                keep = cfg.compression.keep_fraction
                if method == "dgc":
                    keep = agg.dgc_keep_fraction(cfg.compression.dgc(), t)
                up_cap, down_cap = agg.codec_bandwidth(method, 37, n, keep)
                up, down = run.ledger.up[t], run.ledger.down[t]
                if method in ("graddrop", "dgc"):
                    # every worker emits exactly k entries; the mean's support is data dependent
                    ok = up == n * up_cap and down <= down_cap
                else:
                    ok = up == n * up_cap and down == down_cap
                if not ok:
                    return _fail("bandwidth", {"method": method, "workers": n, "round": t, "ledger": (up, down),
                                               "codec": (up_cap, down_cap)})
    for n in (4, 16):
        details[f"table_n{n}"] = {m: agg.formula_bandwidth(m, 1000, n, 0.04) for m in _TABLE_METHODS}
    return CheckResult("bandwidth", True, details)


def trend() -> CheckResult:
    """Noise floor of majority vote falls with N; averaging changes less."""
    from .experiments import worker_sweep

    res = worker_sweep()
    mavo, avg = res.floors["d_lion_mavo"], res.floors["d_lion_avg"]
    improvement = float(np.mean(mavo[:, 0] - mavo[:, -1]))
    avg_change = float(abs(np.mean(avg[:, -1] - avg[:, 0])))
    details = {"mavo_floors": mavo.tolist(), "avg_floors": avg.tolist(),
               "mavo_improvement": improvement, "avg_change": avg_change}
    per_seed = mavo[:, -1] < mavo[:, 0]
    if not per_seed.all():
        return _fail("trend", {"seed": int(res.seeds[int(np.argmin(per_seed))])}, **details)
    if not avg_change < improvement:
        return _fail("trend", {"avg_change": avg_change, "mavo_improvement": improvement}, **details)
    return CheckResult("trend", True, details)


def comparison() -> CheckResult:
    """Desk-scale logistic task: sign methods near G-AdamW and above the compressors."""
    from .experiments import desk_comparison

    res = desk_comparison()
    acc = {m: res.mean_accuracy(m) for m in res.accuracy}
    details = {"mean_accuracy": acc, "per_seed": res.accuracy, "learning_rates": res.learning_rates}
    for m in ("d_lion_mavo", "d_lion_avg"):
        if abs(acc[m] - acc["g_adamw"]) > 0.02:
            return _fail("comparison", {"method": m, "gap_to_g_adamw": acc[m] - acc["g_adamw"]}, **details)
        for c in ("terngrad", "graddrop", "dgc"):
            if not acc[m] > acc[c]:
                return _fail("comparison", {"method": m, "not_above": c, "values": (acc[m], acc[c])}, **details)
    return CheckResult("comparison", True, details)


SUITES: dict[str, Callable[[], CheckResult]] = {
    "contraction": contraction,
    "equivalence": equivalence,
    "aggregation": aggregation_relation,
    "kkt": kkt,
    "unbiasedness": unbiasedness,
    "gradcheck": gradcheck,
    "codecs": codecs,
    "conservation": conservation,
    "determinism": determinism,
    "bandwidth": bandwidth,
    "trend": trend,
    "comparison": comparison,
}

# the slow trend studies are left out of "all"
QUICK = tuple(k for k in SUITES if k not in ("trend", "comparison"))


def run_suites(names) -> list:
    out = []
    for name in names:
        start = time.perf_counter()
        res = SUITES[name]()
        res.seconds = time.perf_counter() - start
        out.append(res)
    return out
