"""Learning algorithms: centralized references, exact-averaging mini-batch
methods, consensus-based methods, and the non-collaborative baselines.

One trial is a strictly sequential state machine: iterations are synchronous
rounds and are never parallelized internally.  All distributed methods start
every node from the same initial point, and all randomness enters through
the counter-based stream, so two runs that consume the same global sample
indices produce the same trajectories up to floating-point summation order.

Runners emit a RunRecord at each checkpoint iteration and return the full
list.  A ``trace`` dict can be passed to capture the raw post-update iterate
trajectory (the full per-node matrix for multi-node methods), which is what
the equivalence tests compare.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from .network import NetworkModel, all_reduce, consensus
from .records import RunRecord, checkpoint_grid
from .streams import LANE_HOLDOUT, SplitPlan, init_unit_vector, kept_span

METHODS = (
    "dmb", "dm_krasulina", "dsgd", "adsgd",
    "centralized", "centralized_accelerated",
    "local_sgd", "local_asgd", "dgd_naive", "dgd_minibatch",
)

_CHUNK_SAMPLES = 16384  # samples pre-generated per prefetch block


# ---------------------------------------------------------------------------
# Stepsize schedules
# ---------------------------------------------------------------------------

SCHEDULE_KINDS = ("constant", "inv_sqrt", "inv_t", "lan_optimal",
                  "dmb_theorem", "krasulina", "adsgd_pair")


@dataclass(frozen=True)
class StepSchedule:
    """Stepsize sequence eta_t (and the momentum pair beta_t where used).

    kinds:
      constant      eta_t = c
      inv_sqrt      eta_t = c / sqrt(t)
      inv_t         eta_t = c / t
      lan_optimal   constant min(1/(2L), D_W/(sigma sqrt(2T))) for a known
                    horizon T
      dmb_theorem   eta_t = 1 / (L + (sigma/D_W) sqrt(t))
      krasulina     eta_t = c0/(2 gap) / (Q + t); needs c0 > 2
      adsgd_pair    eta_t = c / (t+1)^(3/2) with beta_t = max(1, t/2)
    """

    kind: str
    scale: float = 1.0           # c
    smoothness: float | None = None
    sigma: float | None = None
    expanse: float | None = None
    horizon: int | None = None   # T
    offset: float | None = None  # Q
    c0: float | None = None
    gap: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind in ("constant", "inv_sqrt", "inv_t", "adsgd_pair") and self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.kind in ("lan_optimal", "dmb_theorem"):
            for name in ("smoothness", "sigma", "expanse"):
                if getattr(self, name) is None:
                    raise ValueError(f"{self.kind} schedule requires {name}")
            if self.kind == "lan_optimal" and self.horizon is None:
                raise ValueError("lan_optimal schedule requires a horizon")
        if self.kind == "krasulina":
            if self.c0 is None or self.c0 <= 2:
                raise ValueError("krasulina schedule requires c0 > 2")
            if self.gap is None or self.gap <= 0:
                raise ValueError("krasulina schedule requires a positive gap")
            if self.offset is None or self.offset <= 0:
                raise ValueError("krasulina schedule requires a positive offset Q")

    def step(self, t: int) -> float:
        if t < 1:
            raise ValueError("t must be >= 1")
        if self.kind == "constant":
            return self.scale
        if self.kind == "inv_sqrt":
            return self.scale / math.sqrt(t)
        if self.kind == "inv_t":
            return self.scale / t
        if self.kind == "lan_optimal":
            if self.sigma > 0:
                cap = self.expanse / (self.sigma * math.sqrt(2.0 * self.horizon))
            else:
                cap = math.inf
            return min(1.0 / (2.0 * self.smoothness), cap)
        if self.kind == "dmb_theorem":
            return 1.0 / (self.smoothness + (self.sigma / self.expanse) * math.sqrt(t))
        if self.kind == "krasulina":
            return self.c0 / (2.0 * self.gap) / (self.offset + t)
        return self.scale / (t + 1.0) ** 1.5

    def momentum(self, t: int) -> float:
        """beta_t; 1 outside the accelerated pair (plain projected step)."""
        if self.kind == "adsgd_pair":
            return max(1.0, t / 2.0)
        return 1.0


def krasulina_offset_single(dimension: int, data_bound: float, delta: float,
                            scale: float) -> float:
    """Reference lower bound on Q for the single-stream eigenvector schedule."""
    c2 = max(1.0, scale * scale)
    return 512.0 * math.e ** 2 * dimension ** 2 * data_bound ** 4 * c2 / delta ** 4 * math.log(4.0 / delta)


def krasulina_offset_minibatch(dimension: int, data_bound: float, delta: float,
                               scale: float, covariance_noise: float) -> float:
    """Q_1 + Q_2 lower bound on Q for the mini-batched eigenvector schedule.

    covariance_noise is the variance of the mini-batched sample covariance
    (at most the single-sample variance divided by B).
    """
    c2 = max(1.0, scale * scale)
    log_term = math.log(4.0 / delta)
    q1 = 64.0 * math.e * dimension * data_bound ** 4 * c2 / delta ** 2 * log_term
    q2 = 512.0 * math.e ** 2 * dimension ** 2 * covariance_noise * c2 / delta ** 4 * log_term
    return q1 + q2


# ---------------------------------------------------------------------------
# Metric evaluation against the stream's ground truth
# ---------------------------------------------------------------------------

class MetricEvaluator:
    """Maps an iterate (or per-node iterates) to named metric values.

    What can be computed depends on the stream: synthetic streams expose
    their ground truth, so excess risk is exact (spectrum for PCA,
    score-quadrature for the conditional-Gaussian classifier) or a paired
    Monte Carlo estimate on a held-out lane (logistic with random truth).
    File streams have no truth: supervised runs report the loss on the
    checkpoint's own mini-batch (``train_loss``) and eigenvector runs the
    gap of the Rayleigh quotient against the running empirical covariance
    the runner accumulates (``empirical_excess_risk``).
    """

    def __init__(self, stream, loss_model: L.LossModel, holdout: int = 0):
        self.loss_model = loss_model
        self.kind = getattr(stream, "kind", "file")
        self.file_kind = self.kind == "file"
        self._holdout = None
        self._truth_risk = None
        self._truth_model = None
        self._spectrum = None
        self._basis = None
        self._top_vector = None
        self._cond_truth = None
        if self.kind == "logistic_gaussian":
            self._truth_model = stream.truth.model
            if holdout > 0:
                idx = np.arange(1, holdout + 1, dtype=np.int64)
                self._holdout = stream.fetch(idx, lane=LANE_HOLDOUT)
                self._truth_risk = L.estimate_risk(loss_model, self._truth_model, self._holdout)
        elif self.kind == "conditional_gaussian":
            t = stream.truth
            self._cond_truth = t
            self._truth_model = L.conditional_gaussian_bayes_model(t.mean_neg, t.mean_pos, t.noise_var)
            self._truth_risk = L.conditional_gaussian_logistic_risk(
                self._truth_model, t.mean_neg, t.mean_pos, t.noise_var)
        elif self.kind == "gaussian_covariance":
            self._spectrum = stream.truth.spectrum
            self._basis = stream.truth.basis
            self._top_vector = stream.truth.basis[:, 0]

    def evaluate(self, w: np.ndarray, batch=None,
                 covariance: np.ndarray | None = None) -> list[tuple[str, float]]:
        out: list[tuple[str, float]] = []
        if self.file_kind:
            if self.loss_model.kind == "pca_krasulina" and covariance is not None:
                top = float(np.linalg.eigvalsh(covariance)[-1])
                rayleigh = float(w @ covariance @ w) / float(w @ w)
                out.append(("empirical_excess_risk", max(0.0, top - rayleigh)))
            elif batch is not None:
                out.append(("train_loss", L.estimate_risk(self.loss_model, w, batch)))
            return out
        if self.kind == "gaussian_covariance":
            risk = L.pca_excess_risk(self._spectrum, self._basis, w)
            align = float(self._top_vector @ w) ** 2 / float(w @ w)
            out.append(("excess_risk", max(0.0, risk)))
            out.append(("param_error", max(0.0, 1.0 - align)))
            return out
        if self._truth_model is not None:
            diff = w - self._truth_model
            out.append(("param_error", float(diff @ diff)))
        if self.kind == "conditional_gaussian":
            t = self._cond_truth
            risk = L.conditional_gaussian_logistic_risk(w, t.mean_neg, t.mean_pos, t.noise_var)
            out.append(("excess_risk", max(0.0, risk - self._truth_risk)))
        elif self._holdout is not None:
            risk = L.estimate_risk(self.loss_model, w, self._holdout)
            out.append(("excess_risk", max(0.0, risk - self._truth_risk)))
        return out


# ---------------------------------------------------------------------------
# Trial configuration
# ---------------------------------------------------------------------------

@dataclass
class TrialConfig:
    """Everything one algorithm run on one trial needs."""

    algorithm: str               # label used in records
    method: str                  # one of METHODS
    trial: int
    stream: object
    loss_model: L.LossModel
    plan: SplitPlan
    schedule: StepSchedule
    iterations: int              # T
    evaluator: MetricEvaluator
    network: NetworkModel | None = None
    rounds: int = 1              # consensus rounds per iteration (inexact methods)
    seconds_per_iteration: float = float("nan")
    krasulina_aggregate: str = "listing"  # or "mean"
    checkpoints: list[int] = field(default_factory=list)
    init_seed: int | None = None  # seeds w0 draws; defaults to the stream seed

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.checkpoints:
            self.checkpoints = checkpoint_grid(self.iterations)

    @property
    def initial_seed(self) -> int:
        if self.init_seed is not None:
            return self.init_seed
        return getattr(self.stream, "seed", self.trial)


def run(cfg: TrialConfig, trace: dict | None = None) -> list[RunRecord]:
    """Dispatch to the method-specific runner."""
    if cfg.method == "dmb":
        return run_dmb(cfg, trace)
    if cfg.method == "dm_krasulina":
        return run_dm_krasulina(cfg, trace)
    if cfg.method == "dsgd":
        return run_dsgd(cfg, trace)
    if cfg.method == "adsgd":
        return run_adsgd(cfg, trace)
    return run_baseline(cfg.method, cfg, trace)


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

class _BlockFeed:
    """Prefetches kept sample blocks chunk-by-chunk to amortize generation."""

    def __init__(self, stream, plan: SplitPlan, total_iterations: int, supervised: bool):
        self.stream = stream
        self.plan = plan
        self.total = total_iterations
        self.supervised = supervised
        self.chunk = max(1, _CHUNK_SAMPLES // max(1, plan.stride))
        self._base = 1
        self._x = None
        self._y = None

    def _refill(self, t: int) -> None:
        count = min(self.chunk, self.total - t + 1)
        idx = kept_span(self.plan, t, count)
        n, local = self.plan.nodes, self.plan.local_batch
        if self.supervised:
            x, y = self.stream.fetch(idx.reshape(-1))
            self._x = x.reshape(count, n, local, -1)
            self._y = y.reshape(count, n, local)
        else:
            z = self.stream.fetch(idx.reshape(-1))
            self._x = z.reshape(count, n, local, -1)
            self._y = None
        self._base = t

    def blocks(self, t: int):
        """(x, y) for iteration t with shapes (N, B/N, d) and (N, B/N)."""
        if self._x is None or not self._base <= t < self._base + self._x.shape[0]:
            self._refill(t)
        i = t - self._base
        if self.supervised:
            return self._x[i], self._y[i]
        return self._x[i], None


def _shared_node_gradients(model: L.LossModel, w: np.ndarray,
                           x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-node mean gradients at one shared iterate; x (N, m, d), y (N, m)."""
    margins = y * (x @ w[:-1] + w[-1])
    if model.kind == "logistic":
        coeff = -y * np.asarray(L._sigmoid(-margins))
    else:
        coeff = np.where(1.0 - margins > 0.0, -y, 0.0)
    g = np.empty((x.shape[0], w.shape[0]))
    g[:, :-1] = np.einsum("nm,nmd->nd", coeff, x)
    g[:, -1] = coeff.sum(axis=1)
    g /= x.shape[1]
    return g


def _project_rows(w: np.ndarray, radius: float | None) -> np.ndarray:
    if radius is None:
        return w
    if w.ndim == 1:
        nrm2 = float(w @ w)
        if nrm2 > radius * radius:
            return w * (radius / math.sqrt(nrm2))
        return w
    norms = np.sqrt(np.einsum("nd,nd->n", w, w))[:, None]
    over = norms > radius
    if over.any():
        w = np.where(over, w * (radius / norms), w)
    return w


class _Recorder:
    def __init__(self, cfg: TrialConfig):
        self.cfg = cfg
        self.records: list[RunRecord] = []
        self._marks = set(cfg.checkpoints)

    def due(self, t: int) -> bool:
        return t in self._marks

    def emit(self, t: int, metrics_by_node: dict[str, list[tuple[str, float]]]) -> None:
        cfg = self.cfg
        samples = t * cfg.plan.stride
        seconds = t * cfg.seconds_per_iteration
        discarded = t * cfg.plan.discarded
        for node, metrics in metrics_by_node.items():
            self.records.append(RunRecord(
                trial=cfg.trial, algorithm=cfg.algorithm, node=node,
                iteration=t, samples=samples, sim_seconds=seconds,
                discarded_total=discarded, metrics=tuple(metrics)))


def _node_metrics(evaluator: MetricEvaluator, iterates: np.ndarray,
                  x: np.ndarray | None = None,
                  y: np.ndarray | None = None) -> dict[str, list[tuple[str, float]]]:
    """Across-node mean and worst-node values for each metric."""
    per_node = [evaluator.evaluate(iterates[n],
                                   batch=None if x is None else (x[n], y[n]))
                for n in range(iterates.shape[0])]
    names = [name for name, _ in per_node[0]]
    out_mean = []
    out_worst = []
    for j, name in enumerate(names):
        values = [m[j][1] for m in per_node]
        out_mean.append((name, float(np.mean(values))))
        out_worst.append((name, float(np.max(values))))
    return {"agg": out_mean, "worst": out_worst}


def _trace_append(trace: dict | None, w: np.ndarray) -> None:
    if trace is not None:
        trace.setdefault("iterates", []).append(np.array(w, copy=True))


class _CovTracker:
    """Running sample covariance, maintained only for file-backed streams
    (their Rayleigh-quotient metric has no population covariance to use)."""

    def __init__(self, cfg: TrialConfig):
        self.active = cfg.evaluator.file_kind
        d = cfg.loss_model.dimension
        self._sum = np.zeros((d, d)) if self.active else None
        self._count = 0

    def absorb(self, z: np.ndarray) -> None:
        if self.active:
            flat = z.reshape(-1, z.shape[-1])
            self._sum += flat.T @ flat
            self._count += flat.shape[0]

    def absorb_row(self, row: np.ndarray) -> None:
        if self.active:
            self._sum += np.outer(row, row)
            self._count += 1

    @property
    def value(self) -> np.ndarray | None:
        if not self.active or self._count == 0:
            return None
        return self._sum / self._count


# ---------------------------------------------------------------------------
# Scalar fast paths for the B = 1 streaming regime (one sample per
# iteration); same updates as the generic runners, with the per-sample
# margin and coefficient handled in plain Python.
# ---------------------------------------------------------------------------

def _sigmoid_scalar(m: float) -> float:
    if m >= 0:
        return 1.0 / (1.0 + math.exp(-m))
    e = math.exp(m)
    return e / (1.0 + e)


def _run_sgd_stream_scalar(cfg: TrialConfig, trace: dict | None,
                           averaged: bool) -> list[RunRecord]:
    """Plain streaming (B=1) projected SGD; DMB reports the raw iterate,
    the centralized reference its stepsize-weighted average."""
    model, plan, sched = cfg.loss_model, cfg.plan, cfg.schedule
    rec = _Recorder(cfg)
    logistic = model.kind == "logistic"
    radius = model.expanse
    r2 = radius * radius if radius is not None else math.inf
    w = np.zeros(model.model_dimension)
    eta_total = 0.0
    w_avg_acc = np.zeros_like(w)
    chunk = _CHUNK_SAMPLES
    stride = plan.stride
    for t0 in range(1, cfg.iterations + 1, chunk):
        count = min(chunk, cfg.iterations - t0 + 1)
        idx = (np.arange(t0, t0 + count, dtype=np.int64) - 1) * stride + 1
        x, y = cfg.stream.fetch(idx)
        xt = np.concatenate([x, np.ones((count, 1))], axis=1)
        for i in range(count):
            t = t0 + i
            row = xt[i]
            ym = y[i] * float(row @ w)
            if logistic:
                coeff = -y[i] * _sigmoid_scalar(-ym)
            else:
                coeff = -float(y[i]) if 1.0 - ym > 0.0 else 0.0
            eta = sched.step(t)
            w = w - (eta * coeff) * row
            nrm2 = float(w @ w)
            if nrm2 > r2:
                w *= radius / math.sqrt(nrm2)
            if averaged:
                eta_total += eta
                w_avg_acc += eta * w
            _trace_append(trace, w)
            if rec.due(t):
                out = w_avg_acc / eta_total if averaged else w
                rec.emit(t, {"node": cfg.evaluator.evaluate(
                    out, batch=(x[i:i + 1], y[i:i + 1]))})
    return rec.records


def _run_krasulina_scalar(cfg: TrialConfig, trace: dict | None) -> list[RunRecord]:
    """Streaming (B=1) eigenvector iteration; all aggregate conventions
    coincide at one sample per iteration on a single node."""
    sched = cfg.schedule
    rec = _Recorder(cfg)
    w = init_unit_vector(cfg.initial_seed, cfg.loss_model.dimension)
    cov = _CovTracker(cfg)
    chunk = _CHUNK_SAMPLES
    stride = cfg.plan.stride
    for t0 in range(1, cfg.iterations + 1, chunk):
        count = min(chunk, cfg.iterations - t0 + 1)
        idx = (np.arange(t0, t0 + count, dtype=np.int64) - 1) * stride + 1
        z = cfg.stream.fetch(idx)
        for i in range(count):
            t = t0 + i
            row = z[i]
            cov.absorb_row(row)
            proj = float(row @ w)
            nrm2 = float(w @ w)
            eta = sched.step(t)
            w = (1.0 - eta * proj * proj / nrm2) * w + (eta * proj) * row
            _trace_append(trace, w)
            if rec.due(t):
                rec.emit(t, {"node": cfg.evaluator.evaluate(w, covariance=cov.value)})
    return rec.records


# ---------------------------------------------------------------------------
# Exact-averaging methods
# ---------------------------------------------------------------------------

def run_dmb(cfg: TrialConfig, trace: dict | None = None) -> list[RunRecord]:
    """Distributed mini-batch SGD under exact averaging.

    Nodes hold an identical iterate: each averages the loss gradients of its
    local B/N samples, the node means are exactly averaged, and the shared
    iterate takes one projected step.  Discarding (mu > 0) is handled by the
    split plan, which skips the trailing mu indices of every block.
    """
    model, plan = cfg.loss_model, cfg.plan
    if plan.batch == 1 and model.kind in ("logistic", "hinge"):
        return _run_sgd_stream_scalar(cfg, trace, averaged=False)
    feed = _BlockFeed(cfg.stream, plan, cfg.iterations, supervised=True)
    rec = _Recorder(cfg)
    w = np.zeros(model.model_dimension)
    for t in range(1, cfg.iterations + 1):
        x, y = feed.blocks(t)
        if plan.nodes == 1:
            g = L.batch_gradient(model, w, x[0], y[0])
        else:
            g = all_reduce(_shared_node_gradients(model, w, x, y))[0]
        w = _project_rows(w - cfg.schedule.step(t) * g, model.expanse)
        _trace_append(trace, w)
        if rec.due(t):
            flat = (x.reshape(-1, x.shape[-1]), y.reshape(-1))
            rec.emit(t, {"node": cfg.evaluator.evaluate(w, batch=flat)})
    return rec.records


def run_dm_krasulina(cfg: TrialConfig, trace: dict | None = None) -> list[RunRecord]:
    """Distributed mini-batch eigenvector estimation under exact averaging.

    Each node accumulates the pseudo-gradient over its local block; the node
    values are exactly averaged and added to the shared iterate.  The
    default "listing" aggregate keeps the local accumulations un-normalized
    (a sum over B/N, then a mean over N), so the effective stepsize carries
    a B/N factor relative to the "mean" aggregate, which divides by the
    local block size first and matches the batch-mean covariance view.
    """
    plan = cfg.plan
    if plan.batch == 1:
        return _run_krasulina_scalar(cfg, trace)
    feed = _BlockFeed(cfg.stream, plan, cfg.iterations, supervised=False)
    rec = _Recorder(cfg)
    w = init_unit_vector(cfg.initial_seed, cfg.loss_model.dimension)
    mean_aggregate = cfg.krasulina_aggregate == "mean"
    cov = _CovTracker(cfg)
    for t in range(1, cfg.iterations + 1):
        z, _ = feed.blocks(t)
        cov.absorb(z)
        nrm2 = float(w @ w)
        proj = z @ w                                   # (N, B/N)
        sums = np.einsum("nl,nld->nd", proj, z)
        sums -= (np.einsum("nl,nl->n", proj, proj) / nrm2)[:, None] * w
        if mean_aggregate:
            sums /= plan.local_batch
        xi = all_reduce(sums)[0]
        w = w + cfg.schedule.step(t) * xi
        _trace_append(trace, w)
        if rec.due(t):
            rec.emit(t, {"node": cfg.evaluator.evaluate(w, covariance=cov.value)})
    return rec.records


# ---------------------------------------------------------------------------
# Inexact-averaging methods
# ---------------------------------------------------------------------------

def run_dsgd(cfg: TrialConfig, trace: dict | None = None) -> list[RunRecord]:
    """Consensus mini-batch SGD with stepsize-weighted iterate averaging.

    Per iteration: local mini-batch gradients at each node's own iterate, R
    rounds of averaging consensus on the gradients, a projected step, and an
    update of the per-node weighted iterate average (which is the method's
    output).
    """
    if cfg.network is None:
        raise ValueError("dsgd requires a network")
    model, plan, net = cfg.loss_model, cfg.plan, cfg.network
    feed = _BlockFeed(cfg.stream, plan, cfg.iterations, supervised=True)
    rec = _Recorder(cfg)
    w = np.zeros((plan.nodes, model.model_dimension))
    eta_total = 0.0
    w_avg_acc = np.zeros_like(w)
    for t in range(1, cfg.iterations + 1):
        x, y = feed.blocks(t)
        g = L.multi_batch_gradient(model, w, x, y)
        h = consensus(net, g, cfg.rounds)
        eta = cfg.schedule.step(t)
        w = _project_rows(w - eta * h, model.expanse)
        eta_total += eta
        w_avg_acc += eta * w
        _trace_append(trace, w)
        if rec.due(t):
            rec.emit(t, _node_metrics(cfg.evaluator, w_avg_acc / eta_total, x, y))
    return rec.records


def run_adsgd(cfg: TrialConfig, trace: dict | None = None) -> list[RunRecord]:
    """Accelerated consensus mini-batch SGD (momentum triple per node)."""
    if cfg.network is None:
        raise ValueError("adsgd requires a network")
    model, plan, net = cfg.loss_model, cfg.plan, cfg.network
    feed = _BlockFeed(cfg.stream, plan, cfg.iterations, supervised=True)
    rec = _Recorder(cfg)
    shape = (plan.nodes, model.model_dimension)
    v = np.zeros(shape)
    w = np.zeros(shape)
    for t in range(1, cfg.iterations + 1):
        x, y = feed.blocks(t)
        binv = 1.0 / cfg.schedule.momentum(t)
        u = binv * v + (1.0 - binv) * w
        g = L.multi_batch_gradient(model, u, x, y)
        h = consensus(net, g, cfg.rounds)
        v = _project_rows(u - cfg.schedule.step(t) * h, model.expanse)
        w = binv * v + (1.0 - binv) * w
        _trace_append(trace, w)
        if rec.due(t):
            rec.emit(t, _node_metrics(cfg.evaluator, w, x, y))
    return rec.records


# ---------------------------------------------------------------------------
# Single-step reference updates (used directly and by the baselines)
# ---------------------------------------------------------------------------

@dataclass
class AveragedState:
    """Plain SGD iterate plus its stepsize-weighted running average."""

    iterate: np.ndarray
    eta_total: float = 0.0
    weighted_sum: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.weighted_sum is None:
            self.weighted_sum = np.zeros_like(self.iterate)

    @property
    def average(self) -> np.ndarray:
        if self.eta_total == 0.0:
            return self.iterate
        return self.weighted_sum / self.eta_total


def centralized_sgd_step(state: AveragedState, gradient: np.ndarray, eta: float,
                         expanse: float | None) -> AveragedState:
    """w <- proj(w - eta g); the average accrues the new iterate with weight eta."""
    w = _project_rows(state.iterate - eta * gradient, expanse)
    return AveragedState(iterate=w, eta_total=state.eta_total + eta,
                         weighted_sum=state.weighted_sum + eta * w)


@dataclass
class AcceleratedState:
    """Momentum triple (query point u, fast iterate v, output iterate w)."""

    v: np.ndarray
    w: np.ndarray

    def query_point(self, beta: float) -> np.ndarray:
        binv = 1.0 / beta
        return binv * self.v + (1.0 - binv) * self.w


def accelerated_sgd_step(state: AcceleratedState, gradient_at_u: np.ndarray,
                         eta: float, beta: float,
                         expanse: float | None) -> AcceleratedState:
    """Three-line accelerated update; beta = 1 reduces to plain projected SGD."""
    binv = 1.0 / beta
    u = state.query_point(beta)
    v = _project_rows(u - eta * gradient_at_u, expanse)
    w = binv * v + (1.0 - binv) * state.w
    return AcceleratedState(v=v, w=w)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def run_baseline(kind: str, cfg: TrialConfig, trace: dict | None = None) -> list[RunRecord]:
    if kind == "centralized":
        return _run_centralized(cfg, trace, accelerated=False)
    if kind == "centralized_accelerated":
        return _run_centralized(cfg, trace, accelerated=True)
    if kind == "local_sgd":
        return _run_local(cfg, trace, accelerated=False)
    if kind == "local_asgd":
        return _run_local(cfg, trace, accelerated=True)
    if kind in ("dgd_naive", "dgd_minibatch"):
        return _run_dgd(cfg, trace)
    raise ValueError(f"unknown baseline {kind!r}")


def _run_centralized(cfg: TrialConfig, trace: dict | None, accelerated: bool) -> list[RunRecord]:
    """Idealized single machine consuming the whole network batch per split.

    For the PCA loss this is the mini-batched eigenvector iteration on the
    same kept indices (aggregate convention as configured); for the convex
    losses it is projected mini-batch SGD with stepsize-weighted averaging
    (plain iterates when accelerated).
    """
    model, plan = cfg.loss_model, cfg.plan
    rec = _Recorder(cfg)
    if model.kind == "pca_krasulina":
        if plan.batch == 1:
            return _run_krasulina_scalar(cfg, trace)
        feed = _BlockFeed(cfg.stream, SplitPlan(plan.batch, 1, plan.discarded),
                          cfg.iterations, supervised=False)
        w = init_unit_vector(cfg.initial_seed, model.dimension)
        mean_aggregate = cfg.krasulina_aggregate == "mean"
        cov = _CovTracker(cfg)
        for t in range(1, cfg.iterations + 1):
            z, _ = feed.blocks(t)
            cov.absorb(z)
            xi = L.batch_krasulina_sum(w, z[0])
            if mean_aggregate:
                xi /= plan.batch
            else:
                xi /= plan.nodes  # listing aggregate: sum over B/N, mean over N
            w = w + cfg.schedule.step(t) * xi
            _trace_append(trace, w)
            if rec.due(t):
                rec.emit(t, {"node": cfg.evaluator.evaluate(w, covariance=cov.value)})
        return rec.records
    if plan.batch == 1 and not accelerated:
        return _run_sgd_stream_scalar(cfg, trace, averaged=True)
    feed = _BlockFeed(cfg.stream, SplitPlan(plan.batch, 1, plan.discarded),
                      cfg.iterations, supervised=True)
    if accelerated:
        acc = AcceleratedState(v=np.zeros(model.model_dimension),
                               w=np.zeros(model.model_dimension))
        for t in range(1, cfg.iterations + 1):
            x, y = feed.blocks(t)
            beta = cfg.schedule.momentum(t)
            g = L.batch_gradient(model, acc.query_point(beta), x[0], y[0])
            acc = accelerated_sgd_step(acc, g, cfg.schedule.step(t), beta, model.expanse)
            _trace_append(trace, acc.w)
            if rec.due(t):
                rec.emit(t, {"node": cfg.evaluator.evaluate(acc.w, batch=(x[0], y[0]))})
        return rec.records
    state = AveragedState(iterate=np.zeros(model.model_dimension))
    for t in range(1, cfg.iterations + 1):
        x, y = feed.blocks(t)
        g = L.batch_gradient(model, state.iterate, x[0], y[0])
        state = centralized_sgd_step(state, g, cfg.schedule.step(t), model.expanse)
        _trace_append(trace, state.iterate)
        if rec.due(t):
            rec.emit(t, {"node": cfg.evaluator.evaluate(state.average, batch=(x[0], y[0]))})
    return rec.records


def _run_local(cfg: TrialConfig, trace: dict | None, accelerated: bool) -> list[RunRecord]:
    """Per-node independent (accelerated) SGD on each node's own substream."""
    model, plan = cfg.loss_model, cfg.plan
    feed = _BlockFeed(cfg.stream, plan, cfg.iterations, supervised=True)
    rec = _Recorder(cfg)
    shape = (plan.nodes, model.model_dimension)
    if accelerated:
        v = np.zeros(shape)
        w = np.zeros(shape)
        for t in range(1, cfg.iterations + 1):
            x, y = feed.blocks(t)
            binv = 1.0 / cfg.schedule.momentum(t)
            u = binv * v + (1.0 - binv) * w
            g = L.multi_batch_gradient(model, u, x, y)
            v = _project_rows(u - cfg.schedule.step(t) * g, model.expanse)
            w = binv * v + (1.0 - binv) * w
            _trace_append(trace, w)
            if rec.due(t):
                rec.emit(t, _node_metrics(cfg.evaluator, w, x, y))
        return rec.records
    w = np.zeros(shape)
    eta_total = 0.0
    w_avg_acc = np.zeros_like(w)
    for t in range(1, cfg.iterations + 1):
        x, y = feed.blocks(t)
        g = L.multi_batch_gradient(model, w, x, y)
        eta = cfg.schedule.step(t)
        w = _project_rows(w - eta * g, model.expanse)
        eta_total += eta
        w_avg_acc += eta * w
        _trace_append(trace, w)
        if rec.due(t):
            rec.emit(t, _node_metrics(cfg.evaluator, w_avg_acc / eta_total, x, y))
    return rec.records


def _run_dgd(cfg: TrialConfig, trace: dict | None) -> list[RunRecord]:
    """Distributed gradient descent adapted to the rate-limited stream.

    One consensus round on the iterates plus a local gradient step per
    update: w_n <- sum_m a_nm w_m - eta_t g_n(w_n).  The split plan encodes
    the sample accounting: the naive variant consumes one sample per node
    per update and the splitter drops the rest of each block, while the
    mini-batched variant consumes local blocks of size 1/rho with nothing
    dropped.
    """
    if cfg.network is None:
        raise ValueError("dgd requires a network")
    model, plan, net = cfg.loss_model, cfg.plan, cfg.network
    feed = _BlockFeed(cfg.stream, plan, cfg.iterations, supervised=True)
    rec = _Recorder(cfg)
    w = np.zeros((plan.nodes, model.model_dimension))
    for t in range(1, cfg.iterations + 1):
        x, y = feed.blocks(t)
        g = L.multi_batch_gradient(model, w, x, y)
        w = _project_rows(net.weights @ w - cfg.schedule.step(t) * g, model.expanse)
        _trace_append(trace, w)
        if rec.due(t):
            rec.emit(t, _node_metrics(cfg.evaluator, w, x, y))
    return rec.records
