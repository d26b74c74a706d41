"""Bulk-synchronous multi-worker training loop.

Each round every worker draws a batch from its own random stream, computes
its message (a sign update, a full-precision gradient, or a compressed
gradient), and encodes it with the wire codecs into its own payload. The server decodes the
messages, aggregates, encodes one broadcast payload, and every worker decodes
that payload and applies ``x <- x - lr * (update + weight_decay * x)`` to its
own copy of the parameters. Every byte counted in the ledger is a byte that
was actually produced and decoded.

Randomness: worker ``i`` owns a Philox stream keyed by ``(seed, i)``. Streams
do not depend on the number of workers, so worker 0 sees the same batches at
N = 4 and N = 64. Worker computations may run on a thread pool; results are
collected and reduced in worker-id order, so output does not depend on
scheduling.

Worker state is stored stacked, one row per worker. Updates on the stack are
elementwise, so each row is bit-for-bit what a lone worker would compute.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import aggregation as agg
from . import core_math as cm
from .config import RunConfig
from .errors import ConsistencyError, DivergenceError, InvalidParameterError
from .metrics import kkt_score, summarize
from .optimizers import (
    AdamWState,
    LionState,
    SignumState,
    adamw_direction,
    apply_update,
    cosine_lr,
    decayed_step,
    lion_delta,
    signum_delta,
)
from .problems import (
    LogisticProblem,
    MlpProblem,
    QuadraticProblem,
    generate_blobs,
    generate_two_class,
    load_csv_dataset,
    shard_data,
)

__all__ = [
    "WorkerNode",
    "WorkerCohort",
    "make_workers",
    "ServerState",
    "RoundLog",
    "RunLog",
    "Simulation",
    "build_problem",
    "initial_point",
    "worker_rng",
    "pairwise_sum",
    "run_round",
    "run_training",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("round", "loss", "full_loss", "kkt_score", "dist_f", "up_bits", "down_bits")

SIGN_METHODS = ("d_lion_mavo", "d_lion_avg", "d_signum_mavo", "d_signum_avg")
GLOBAL_METHODS = ("g_lion", "g_adamw")
SPARSE_METHODS = ("graddrop", "dgc")

_INIT_STREAM = 1 << 40


@dataclass
class WorkerNode:
    id: int
    x: np.ndarray
    opt_state: object
    shard: object
    rng: np.random.Generator
    compressor: Optional[agg.CompressorState] = None


@dataclass
class ServerState:
    """Server-held optimizer state; only the global methods use it."""

    opt_state: object = None


@dataclass(frozen=True)
class RoundLog:
    round: int
    loss: float
    full_loss: float
    kkt_score: float
    dist_f: float
    up_bits: int
    down_bits: int
    wall_time: float = 0.0
    accuracy: Optional[float] = None

    def csv_row(self) -> str:
        return (
            f"{self.round},{self.loss!r},{self.full_loss!r},{self.kkt_score!r},"
            f"{self.dist_f!r},{self.up_bits},{self.down_bits}"
        )


@dataclass
class RunLog:
    config: RunConfig
    rounds: list
    ledger: agg.BandwidthLedger
    final_x: np.ndarray
    trajectory: Optional[list] = None
    lrs: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def summary(self) -> dict:
        return summarize(self)

    def to_csv(self) -> str:
        return "\n".join([",".join(CSV_COLUMNS)] + [r.csv_row() for r in self.rounds]) + "\n"


# -- construction ------------------------------------------------------------

def worker_rng(seed: int, worker_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(worker_id,))))


def build_problem(spec):
    """Instantiate the oracle described by a ProblemSpec."""
    if spec.kind == "quadratic":
        if spec.quadratic_form == "random":
            return QuadraticProblem.random(spec.data_seed, spec.dim, spec.sigma, spec.condition)
        curv = np.linspace(spec.curvature_min, spec.curvature_max, spec.dim)
        return QuadraticProblem.diagonal(curv, np.full(spec.dim, spec.optimum), spec.sigma)
    if spec.csv_path:
        data = load_csv_dataset(spec.csv_path)
    elif spec.kind == "logistic":
        data = generate_two_class(spec.data_seed, spec.n_samples, spec.dim, spec.separation)
    else:
        data = generate_blobs(spec.data_seed, spec.n_samples, spec.dim, spec.classes)
    if spec.kind == "logistic":
        return LogisticProblem(data, spec.reg)
    return MlpProblem(data, spec.hidden, spec.classes)


def initial_point(spec, dim: int, seed: int) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(dim)
    if spec.init == "constant":
        return np.full(dim, float(spec.init_scale))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(_INIT_STREAM,))))
    return spec.init_scale * rng.standard_normal(dim) / math.sqrt(dim)


def pairwise_sum(vectors: list) -> np.ndarray:
    """Sum in a fixed binary-tree order over the list position."""
    if len(vectors) == 1:
        return vectors[0].copy()
    mid = (len(vectors) + 1) // 2
    return pairwise_sum(vectors[:mid]) + pairwise_sum(vectors[mid:])


def _initial_opt_state(cfg: RunConfig, d):
    m = cfg.method
    if m in ("d_lion_mavo", "d_lion_avg"):
        return LionState.zeros(d)
    if m in ("d_signum_mavo", "d_signum_avg"):
        return SignumState.zeros(d, cfg.signum_beta)
    if m == "g_lion" and cfg.global_form == "averaged_momenta":
        return LionState.zeros(d)
    return None


def _initial_server_state(cfg: RunConfig, d: int) -> ServerState:
    if cfg.method == "g_adamw":
        return ServerState(AdamWState.zeros(d))
    if cfg.method == "g_lion" and cfg.global_form == "averaged_gradients":
        return ServerState(LionState.zeros(d))
    return ServerState()


@dataclass
class WorkerCohort:
    """Every worker's state, stacked with one row per worker.

    ``x`` is (N, d); ``opt_state`` holds an (N, d) momentum for the methods with
    worker-side state. Row operations are elementwise, so each row evolves
    exactly as it would on its own; :meth:`node` gives the per-worker view.
    """

    x: np.ndarray
    opt_state: object
    shards: list
    rngs: list
    compressors: Optional[list] = None

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def node(self, i: int) -> WorkerNode:
        st = self.opt_state
        if isinstance(st, SignumState):
            st = SignumState(st.momentum[i].copy(), st.beta)
        elif isinstance(st, LionState):
            st = LionState(st.momentum[i].copy())
        return WorkerNode(
            i, self.x[i].copy(), st, self.shards[i], self.rngs[i],
            self.compressors[i] if self.compressors is not None else None,
        )


def make_workers(cfg: RunConfig, oracle, x0: np.ndarray) -> WorkerCohort:
    dataset_size = len(oracle.data) if hasattr(oracle, "data") else None
    n = cfg.workers
    shards = (
        shard_data(dataset_size, n, cfg.seed, disjoint=cfg.sharding == "disjoint")
        if dataset_size is not None
        else [None] * n
    )
    d = x0.size
    comps = [agg.CompressorState.zeros(d) for _ in range(n)] if cfg.method in SPARSE_METHODS else None
    return WorkerCohort(
        np.tile(x0, (n, 1)),
        _initial_opt_state(cfg, (n, d)),
        shards,
        [worker_rng(cfg.seed, i) for i in range(n)],
        comps,
    )


# -- one round ---------------------------------------------------------------

def _gradients(cohort: WorkerCohort, oracle, batch_size: int, pool=None):
    """Per-worker (losses, stacked gradients), each from the worker's own stream."""
    x = cohort.x[0]
    if pool is None and hasattr(oracle, "loss_grad_many"):
        batches = [oracle.sample_batch(r, batch_size, s) for r, s in zip(cohort.rngs, cohort.shards)]
        return oracle.loss_grad_many(x, batches, cohort.rngs)

    def one(i):
        rng = cohort.rngs[i]
        batch = oracle.sample_batch(rng, batch_size, cohort.shards[i])
        return oracle.loss_grad(cohort.x[i], batch, rng)

    n = cohort.size
    results = list(pool.map(one, range(n))) if pool is not None else [one(i) for i in range(n)]
    return np.array([r[0] for r in results], dtype=np.float64), np.stack([r[1] for r in results])


def _scalar_bytes(v: float) -> bytes:
    return np.array([v], dtype="<f8").tobytes()


@dataclass
class _Exchange:
    ups: list  # (payload, raw bits) per worker
    down: bytes
    down_raw: int
    update: np.ndarray  # the broadcast decoded with the downlink codec
    bounded: bool
    opt_state: object = None
    compressors: Optional[list] = None
    server: Optional[ServerState] = None


def _sign_round(cohort, grads, cfg, h, d) -> _Exchange:
    n = cohort.size
    if cfg.method.startswith("d_lion"):
        delta, state = lion_delta(cohort.opt_state, grads, h)
    else:
        delta, state = signum_delta(cohort.opt_state, grads)
    one_bit = cfg.codec == "one_bit"
    payloads = cm.pack_binary_rows(delta) if one_bit else cm.pack_ternary_rows(delta)
    raw = d if one_bit else 2 * d
    # server side: only the bytes are seen
    decoded = cm.unpack_binary_rows(payloads, d) if one_bit else cm.unpack_ternary_rows(payloads, d)
    s = cm.SumVector(decoded.sum(axis=0, dtype=np.int64), n)
    if cfg.method.endswith("mavo"):
        vote = np.sign(s.values).astype(np.int8)
        if one_bit:
            down, down_raw = cm.pack_binary(vote), d
            update = cm.unpack_binary(down, d).astype(np.float64)
        else:
            down, down_raw = cm.pack_ternary(vote), 2 * d
            update = cm.unpack_ternary(down, d).astype(np.float64)
    elif one_bit:
        down, down_raw = cm.pack_sum(s), cm.level_bits(n + 1) * d
        update = cm.unpack_sum(down, d, n).values / n
    else:
        down, down_raw = cm.pack_sum_ternary(s), cm.level_bits(2 * n + 1) * d
        update = cm.unpack_sum_ternary(down, d, n).values / n
    return _Exchange([(p, raw) for p in payloads], down, down_raw, update, True, opt_state=state)


def _global_round(cohort, grads, server, cfg, h, d) -> _Exchange:
    n = cohort.size
    state = None
    if cfg.global_form == "averaged_momenta":
        mom = cohort.opt_state.momentum
        sent = h.beta1 * mom + (1.0 - h.beta1) * grads
        state = LionState(h.beta2 * mom + (1.0 - h.beta2) * grads)
    else:
        sent = grads
    payloads = [cm.pack_reals(row) for row in sent]
    mean = pairwise_sum([cm.unpack_reals(p, d) for p in payloads]) / n
    if cfg.method == "g_adamw":
        direction, server_state = adamw_direction(
            server.opt_state, mean, (cfg.adamw_beta1, cfg.adamw_beta2), cfg.adamw_eps
        )
        bounded = False
    elif cfg.global_form == "averaged_momenta":
        direction, server_state, bounded = np.sign(mean), server.opt_state, True
    else:
        delta, server_state = lion_delta(server.opt_state, mean, h)
        direction, bounded = delta.astype(np.float64), True
    down = cm.pack_reals(direction)
    return _Exchange(
        [(p, 64 * d) for p in payloads], down, 64 * d, cm.unpack_reals(down, d), bounded,
        opt_state=state, server=ServerState(server_state),
    )


def _terngrad_round(cohort, grads, cfg, d) -> _Exchange:
    # scale sharing: every worker sends ||g||_inf, the server broadcasts the max,
    # then each worker ternarizes against the shared scale with its own stream
    n = cohort.size
    norms = [float(np.abs(g).max()) for g in grads]
    scale = max(norms)
    ups, tern = [], []
    for g, rng, norm in zip(grads, cohort.rngs, norms):
        _, t = agg.terngrad_compress(g, rng, scale=scale)
        payload = _scalar_bytes(norm) + cm.pack_ternary(t)
        ups.append((payload, 64 + 2 * d))
        tern.append(cm.unpack_ternary(payload[8:], d))
    down = _scalar_bytes(scale) + cm.pack_sum_ternary(cm.sum_updates(tern))
    sc = float(np.frombuffer(down[:8], dtype="<f8")[0])
    update = sc * cm.unpack_sum_ternary(down[8:], d, n).values / n
    return _Exchange(ups, down, 64 + cm.level_bits(2 * n + 1) * d, update, False)


def _sparse_round(cohort, grads, cfg, d) -> _Exchange:
    n = cohort.size
    ups, comps = [], []
    dgc = cfg.compression.dgc() if cfg.method == "dgc" else None
    for g, comp in zip(grads, cohort.compressors):
        if dgc is None:
            sparse, comp = agg.graddrop_compress(g, comp, cfg.compression.keep_fraction)
        else:
            sparse, comp = agg.dgc_compress(g, comp, dgc)
        ups.append((agg.pack_sparse(sparse), agg.sparse_payload_bits(sparse.indices.size, d)))
        comps.append(comp)
    total = np.zeros(d)
    for payload, _ in ups:
        total += agg.unpack_sparse(payload, d).to_dense()
    mean = agg.SparseUpdate.from_dense(total / n)
    down = agg.pack_sparse(mean)
    return _Exchange(
        ups, down, agg.sparse_payload_bits(mean.indices.size, d),
        agg.unpack_sparse(down, d).to_dense(), False, compressors=comps,
    )


def run_round(cohort: WorkerCohort, server: ServerState, oracle, cfg: RunConfig, t: int, ledger, pool=None,
              h: Optional[cm.Hyperparams] = None):
    """One synchronous round. Returns (cohort', server', RoundLog)."""
    start = time.perf_counter()
    h = h or cfg.hyperparams()
    n, d = cohort.x.shape
    if not (cohort.x == cohort.x[0]).all():
        bad = int(np.argmax(~(cohort.x == cohort.x[0]).all(axis=1)))
        raise ConsistencyError(f"worker {bad} parameters differ from worker 0 before round {t}")

    losses, grads = _gradients(cohort, oracle, cfg.batch_size, pool)
    m = cfg.method
    if m in SIGN_METHODS:
        ex = _sign_round(cohort, grads, cfg, h, d)
    elif m in GLOBAL_METHODS:
        ex = _global_round(cohort, grads, server, cfg, h, d)
    elif m == "terngrad":
        ex = _terngrad_round(cohort, grads, cfg, d)
    else:
        ex = _sparse_round(cohort, grads, cfg, d)

    formula = agg.formula_bandwidth(m, d, n, cfg.compression.keep_fraction)
    up_bits, down_bits = ledger.record(
        [p for p, _ in ex.ups],
        [ex.down],
        sum(r for _, r in ex.ups),
        ex.down_raw,
        (formula[0] * n, formula[1]),
    )

    # every worker applies the same decoded broadcast to its own row
    if ex.bounded:
        x = apply_update(cohort.x, ex.update, h)
    else:
        x = decayed_step(cohort.x, ex.update, h.lr, h.weight_decay)
    if not (x == x[0]).all():
        bad = int(np.argmax(~(x == x[0]).all(axis=1)))
        raise ConsistencyError(f"worker {bad} diverged from worker 0 in round {t}")
    cohort = WorkerCohort(
        x,
        ex.opt_state if ex.opt_state is not None else cohort.opt_state,
        cohort.shards,
        cohort.rngs,
        ex.compressors if ex.compressors is not None else cohort.compressors,
    )
    server = ex.server if ex.server is not None else server

    x_new = x[0]
    batch_loss = float(np.mean(losses))
    full_loss = float(oracle.full_loss(x_new))
    if not (math.isfinite(batch_loss) and math.isfinite(full_loss) and np.all(np.isfinite(x_new))):
        raise DivergenceError(t)
    lam = h.weight_decay
    log = RoundLog(
        round=t,
        loss=batch_loss,
        full_loss=full_loss,
        kkt_score=kkt_score(oracle.full_grad(x_new), x_new, lam),
        dist_f=cm.dist_to_feasible(x_new, lam) if lam > 0 else 0.0,
        up_bits=up_bits,
        down_bits=down_bits,
        wall_time=time.perf_counter() - start,
        accuracy=oracle.accuracy(x_new) if hasattr(oracle, "accuracy") else None,
    )
    return cohort, server, log


# -- whole runs --------------------------------------------------------------

class Simulation:
    """Stateful driver around :func:`run_round`; supports checkpoint and resume."""

    def __init__(self, cfg: RunConfig, oracle=None, x0: Optional[np.ndarray] = None):
        self.cfg = cfg
        self.oracle = oracle if oracle is not None else build_problem(cfg.problem)
        if x0 is None:
            x0 = initial_point(cfg.problem, self.oracle.dim, cfg.seed)
        x0 = cm.as_param_vector(x0).copy()
        if x0.size != self.oracle.dim:
            raise InvalidParameterError("initial point has the wrong length")
        self.cohort = make_workers(cfg, self.oracle, x0)
        self.server = _initial_server_state(cfg, x0.size)
        self.ledger = agg.BandwidthLedger()
        self.rounds: list = []
        self.lrs: list = []
        self.trajectory = [x0.copy()] if cfg.record_trajectory else None
        self.t = 0
        self.stopped_early = False
        self._base_h = cfg.hyperparams()

    @property
    def x(self) -> np.ndarray:
        return self.cohort.x[0]

    @property
    def workers(self) -> list:
        return [self.cohort.node(i) for i in range(self.cohort.size)]

    def hyperparams_at(self, t: int) -> cm.Hyperparams:
        if self.cfg.lr_schedule == "cosine":
            return self._base_h.with_lr(cosine_lr(self._base_h.lr, t, self.cfg.rounds))
        return self._base_h

    def step(self, pool=None) -> RoundLog:
        h = self.hyperparams_at(self.t)
        self.cohort, self.server, log = run_round(
            self.cohort, self.server, self.oracle, self.cfg, self.t, self.ledger, pool, h
        )
        self.rounds.append(log)
        self.lrs.append(h.lr)
        if self.trajectory is not None:
            self.trajectory.append(self.x.copy())
        self.t += 1
        return log

    def run(self, until: Optional[int] = None) -> RunLog:
        end = self.cfg.rounds if until is None else min(until, self.cfg.rounds)
        threshold = self.cfg.early_stop_grad_norm
        pool = ThreadPoolExecutor(self.cfg.threads) if self.cfg.threads > 1 else None
        try:
            while self.t < end and not self.stopped_early:
                self.step(pool)
                if threshold > 0 and np.linalg.norm(self.oracle.full_grad(self.x)) < threshold:
                    self.stopped_early = True
        finally:
            if pool is not None:
                pool.shutdown()
        return self.run_log()

    def run_log(self) -> RunLog:
        return RunLog(
            self.cfg, list(self.rounds), self.ledger, self.x.copy(),
            list(self.trajectory) if self.trajectory is not None else None,
            list(self.lrs), self.stopped_early,
        )


def run_training(cfg: RunConfig, oracle=None, x0=None) -> RunLog:
    """Execute ``cfg.rounds`` rounds (or until the early-stop criterion fires)."""
    return Simulation(cfg, oracle, x0).run()
