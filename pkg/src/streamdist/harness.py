"""Experiment orchestration: config files, Monte Carlo execution, aggregation,
and CSV/figure emission.

A config is an INI-style document (parsed with configparser) with one
``[algorithm.<name>]`` section per curve; the full schema is documented in
the README.  Trials are independent: trial i derives its own seed from the
master seed, builds its own stream and ground truth, and runs every
algorithm on it.  Aggregation is a pure reduction over the per-trial record
lists, so results are bitwise identical for any worker count.
"""

from __future__ import annotations

import ast
import configparser
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import algorithms as alg
from . import losses as L
from . import rates as R
from .network import NetworkModel, build_topology
from .records import RunRecord
from .streams import LANE_CALIB, SplitPlan, derive_seed, make_stream

_REQUIRED = object()

CSV_HEADER = ("experiment,algorithm,B,N,R,mu,trial_count,"
              "t,t_prime,sim_seconds,metric,mean,median,q10,q90")
RAW_CSV_HEADER = "experiment,algorithm,B,N,R,mu,trial,t,t_prime,sim_seconds,metric,value"

# Default stepsize scales from the bundled experiments; lookups take the
# nearest table entry in log(B).
_DMB_SCALE_TABLE = ((1, 0.1), (10, 0.1), (100, 0.5), (1000, 1.0), (10000, 1.0))
_DEFAULT_SCHEDULES = {
    "dmb": "inv_sqrt", "centralized": "inv_sqrt", "local_sgd": "inv_sqrt",
    "dsgd": "inv_sqrt", "dgd_naive": "inv_sqrt", "dgd_minibatch": "inv_sqrt",
    "adsgd": "adsgd_pair", "local_asgd": "adsgd_pair",
    "centralized_accelerated": "adsgd_pair",
    "dm_krasulina": "inv_t",
}


class ConfigError(ValueError):
    """Configuration problem with a section/option location for diagnostics."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class AlgorithmSpec:
    """One [algorithm.<name>] section, unresolved."""

    name: str
    method: str
    batch: int | None = None          # None means rule-based sizing
    rule_constant: float = 0.1
    rho: float | None = None
    nodes: int | None = None
    rounds: int | str | None = None   # int, "max", or "auto"
    mu: int | str = 0                 # int or "auto"
    schedule_kind: str | None = None
    scale: float | None = None        # c
    c0: float | None = None
    delta: float = 0.1
    offset: float | str = "auto"      # Q for the eigenvector theory schedule
    aggregate: str = "listing"        # eigenvector aggregate convention


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    horizon: int | str                # t' or an expression in N, e.g. "N**2"
    trials: int
    seed: int
    holdout: int
    workers: int
    nodes: int
    output: str
    stream: dict
    loss: dict
    rates: dict | None
    topology: dict | None
    algorithms: tuple[AlgorithmSpec, ...]


@dataclass(frozen=True)
class ResolvedAlgorithm:
    """Concrete per-algorithm settings after applying rates/rules."""

    spec: AlgorithmSpec
    batch: int
    nodes: int
    rounds: int
    mu: int
    iterations: int
    seconds_per_iteration: float
    network: NetworkModel | None


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    algorithm: str
    batch: int
    nodes: int
    rounds: int
    mu: int
    trial_count: int
    iteration: int
    samples: int
    sim_seconds: float
    metric: str
    mean: float
    median: float
    q10: float
    q90: float


@dataclass
class Results:
    experiment: str
    rows: list[ResultRow]
    algorithm_order: list[str]
    raw: list[RunRecord] | None = None


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _convert(raw: str, conv, location: str):
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse value {raw!r}", location)


def _get(parser: configparser.ConfigParser, section: str, option: str,
         conv=str, default=_REQUIRED):
    if not parser.has_option(section, option):
        if default is _REQUIRED:
            raise ConfigError("missing required option", f"[{section}] {option}")
        return default
    return _convert(parser.get(section, option), conv, f"[{section}] {option}")


def _int_or_keyword(raw: str, keywords: tuple[str, ...]):
    raw = raw.strip()
    if raw in keywords:
        return raw
    return int(raw)


def parse_horizon(raw: str) -> int | str:
    raw = raw.strip()
    try:
        return int(float(raw))
    except ValueError:
        eval_horizon(raw, 2)  # validate the expression early
        return raw


def eval_horizon(expr: int | str, nodes: int) -> int:
    """Evaluate the horizon, which may be an arithmetic expression in N."""
    if isinstance(expr, int):
        return expr
    allowed = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Load,
               ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.FloorDiv)
    tree = ast.parse(expr, mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, allowed):
            raise ConfigError(f"unsupported horizon expression {expr!r}")
        if isinstance(node, ast.Name) and node.id != "N":
            raise ConfigError(f"horizon expression may only use N, got {node.id!r}")
    value = eval(compile(tree, "<horizon>", "eval"), {"__builtins__": {}}, {"N": nodes})
    if value < 1:
        raise ConfigError(f"horizon {expr!r} evaluates to {value} < 1")
    return int(round(value))


def bundled_config(name: str) -> Path:
    """Path of a packaged experiment config (e.g. 'dmb_batch_sweep_desk.cfg')."""
    from importlib.resources import files

    return Path(str(files("streamdist").joinpath("configs", name)))


def parse_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read and validate a .cfg experiment file; overrides are section.option=value."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    path = Path(path)
    try:
        with open(path) as handle:
            parser.read_file(handle, source=str(path))
    except OSError as exc:
        raise ConfigError(str(exc))
    except configparser.Error as exc:
        raise ConfigError(str(exc))
    for key, value in (overrides or {}).items():
        section, _, option = key.rpartition(".")
        if not section:
            raise ConfigError(f"override {key!r} must look like section.option=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, option, value)
    return _validate(parser)


def _validate(parser: configparser.ConfigParser) -> ExperimentConfig:
    if not parser.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    if not parser.has_section("stream"):
        raise ConfigError("missing [stream] section")
    name = _get(parser, "experiment", "name", str)
    nodes = _get(parser, "experiment", "nodes", int, 1)
    config = ExperimentConfig(
        name=name,
        horizon=parse_horizon(_get(parser, "experiment", "horizon", str)),
        trials=_get(parser, "experiment", "trials", int, 1),
        seed=_get(parser, "experiment", "seed", int, 0),
        holdout=_get(parser, "experiment", "holdout", int, 2048),
        workers=_get(parser, "experiment", "workers", int, 0),
        nodes=nodes,
        output=_get(parser, "experiment", "output", str, name),
        stream=_parse_stream(parser),
        loss=_parse_loss(parser),
        rates=_parse_rates(parser),
        topology=_parse_topology(parser),
        algorithms=_parse_algorithms(parser),
    )
    if config.trials < 1:
        raise ConfigError("trials must be >= 1", "[experiment] trials")
    if config.nodes < 1:
        raise ConfigError("nodes must be >= 1", "[experiment] nodes")
    if not config.algorithms:
        raise ConfigError("no [algorithm.*] sections found")
    return config


def _parse_stream(parser) -> dict:
    kind = _get(parser, "stream", "kind", str)
    out = {"kind": kind}
    if kind == "file":
        out["path"] = _get(parser, "stream", "path", str)
        out["header"] = parser.getboolean("stream", "header", fallback=False)
        out["label_column"] = parser.getboolean("stream", "label_column", fallback=False)
        out["dimension"] = _get(parser, "stream", "dimension", int)
        if out["dimension"] < 1:
            raise ConfigError("file streams need an explicit positive dimension",
                              "[stream] dimension")
        return out
    out["dimension"] = _get(parser, "stream", "dimension", int)
    if kind == "conditional_gaussian":
        out["noise_var"] = _get(parser, "stream", "noise_var", float, 2.0)
    elif kind == "gaussian_covariance":
        out["top"] = _get(parser, "stream", "top", float, 1.0)
        out["gap"] = _get(parser, "stream", "gap", float, 0.1)
        out["basis"] = _get(parser, "stream", "basis", str, "random")
        if parser.has_option("stream", "eigenvalues"):
            raw = _get(parser, "stream", "eigenvalues", str)
            out["eigenvalues"] = [float(v) for v in raw.split(",")]
    elif kind != "logistic_gaussian":
        raise ConfigError(f"unknown stream kind {kind!r}", "[stream] kind")
    return out


def _parse_loss(parser) -> dict:
    stream_kind = _get(parser, "stream", "kind", str)
    default_kind = {"logistic_gaussian": "logistic", "conditional_gaussian": "logistic",
                    "gaussian_covariance": "pca_krasulina"}.get(stream_kind)
    out = {"kind": _get(parser, "loss", "kind", str, default_kind) if parser.has_section("loss")
           else default_kind}
    if out["kind"] is None:
        raise ConfigError("file streams need an explicit [loss] kind")
    if not parser.has_section("loss"):
        return out
    for option, conv in (("expanse", str), ("smoothness", float),
                         ("sigma2", float), ("kappa", float)):
        if parser.has_option("loss", option):
            out[option] = _get(parser, "loss", option, conv)
    return out


def _parse_rates(parser) -> dict | None:
    if not parser.has_section("rates"):
        return None
    return {
        "streaming": _get(parser, "rates", "streaming", float),
        "processing": _get(parser, "rates", "processing", float),
        "messaging": _get(parser, "rates", "messaging", float),
    }


def _parse_topology(parser) -> dict | None:
    if not parser.has_section("topology"):
        return None
    out = {"kind": _get(parser, "topology", "kind", str)}
    if parser.has_option("topology", "k"):
        out["k"] = _get(parser, "topology", "k", int)
    out["seed"] = _get(parser, "topology", "seed", int, 0)
    out["weight_rule"] = _get(parser, "topology", "weight_rule", str, "metropolis")
    return out


def _parse_algorithms(parser) -> tuple[AlgorithmSpec, ...]:
    specs = []
    for section in parser.sections():
        if not section.startswith("algorithm."):
            continue
        name = section.split(".", 1)[1]
        method = _get(parser, section, "method", str)
        if method not in alg.METHODS:
            raise ConfigError(f"unknown method {method!r}", f"[{section}] method")
        batch_raw = _get(parser, section, "batch", str, None)
        if batch_raw is None or batch_raw.strip() == "rule":
            batch = None
        else:
            batch = _convert(batch_raw, int, f"[{section}] batch")
        rounds_raw = _get(parser, section, "rounds", str, None)
        rounds = None if rounds_raw is None else _convert(
            rounds_raw, lambda r: _int_or_keyword(r, ("max", "auto")), f"[{section}] rounds")
        mu_raw = _get(parser, section, "mu", str, "0")
        mu = _convert(mu_raw, lambda r: _int_or_keyword(r, ("auto",)), f"[{section}] mu")
        specs.append(AlgorithmSpec(
            name=name,
            method=method,
            batch=batch,
            rule_constant=_get(parser, section, "rule_constant", float, 0.1),
            rho=_get(parser, section, "rho", float, None),
            nodes=_get(parser, section, "nodes", int, None),
            rounds=rounds,
            mu=mu,
            schedule_kind=_get(parser, section, "schedule", str, None),
            scale=_get(parser, section, "c", float, None),
            c0=_get(parser, section, "c0", float, None),
            delta=_get(parser, section, "delta", float, 0.1),
            offset=_get(parser, section, "q", lambda r: _int_or_keyword(r, ("auto",)), "auto"),
            aggregate=_get(parser, section, "aggregate", str, "listing"),
        ))
    return tuple(specs)


# ---------------------------------------------------------------------------
# Resolution: turn specs into concrete run parameters
# ---------------------------------------------------------------------------

_EXACT_METHODS = ("dmb", "dm_krasulina")
_CONSENSUS_METHODS = ("dsgd", "adsgd", "dgd_naive", "dgd_minibatch")


def _system_rates(config: ExperimentConfig, batch: int, nodes: int, rounds: int) -> R.SystemRates | None:
    if config.rates is None:
        return None
    return R.SystemRates(
        streaming_rate=config.rates["streaming"],
        processing_rate=config.rates["processing"],
        messaging_rate=config.rates["messaging"],
        nodes=nodes, batch=batch, rounds=max(1, rounds))


def build_network(config: ExperimentConfig) -> NetworkModel | None:
    if config.topology is None:
        return None
    topo = dict(config.topology)
    return build_topology(topo.pop("kind"), config.nodes, **topo)


def resolve_algorithm(config: ExperimentConfig, spec: AlgorithmSpec,
                      network: NetworkModel | None) -> ResolvedAlgorithm:
    where = f"[algorithm.{spec.name}]"
    if spec.method in ("centralized", "centralized_accelerated"):
        nodes = spec.nodes if spec.nodes is not None else 1
    else:
        nodes = spec.nodes if spec.nodes is not None else config.nodes
    needs_net = spec.method in _CONSENSUS_METHODS
    if needs_net:
        if network is None:
            raise ConfigError(f"method {spec.method} needs a [topology] section", where)
        if nodes != network.nodes:
            raise ConfigError(f"nodes={nodes} does not match the {network.nodes}-node topology", where)
    horizon = eval_horizon(config.horizon, config.nodes)

    if spec.method in ("dgd_naive", "dgd_minibatch"):
        return _resolve_dgd(config, spec, network, nodes, horizon, where)

    if spec.batch is not None:
        batch = spec.batch
    else:
        # The rule sizes the *network-wide* batch from the network's node
        # count, so a centralized reference run consumes the same B per split.
        if network is None or spec.rho is None:
            raise ConfigError("rule-based batch needs a topology and rho", where)
        local = spec.rule_constant * math.log(horizon) / (spec.rho * math.log(1.0 / network.lambda2))
        batch = config.nodes * max(1, int(round(local)))
    if batch < 1 or batch % nodes != 0:
        raise ConfigError(f"batch {batch} is not a positive multiple of nodes {nodes}", where)

    rounds = spec.rounds
    if rounds is None:
        rounds = "max" if (config.rates is not None and spec.method in _EXACT_METHODS) else \
                 ("auto" if spec.method in ("dsgd", "adsgd") and spec.rho is not None else 1)
    if spec.method in _EXACT_METHODS and nodes == 1:
        rounds = 0  # single machine: nothing to average, no communication phase
    elif rounds == "max":
        if config.rates is None:
            raise ConfigError("rounds=max needs a [rates] section", where)
        rounds = R.max_rounds(_system_rates(config, batch, nodes, 1))
        if rounds == 0 and spec.method in _EXACT_METHODS:
            raise ConfigError("rate plan infeasible: no time remains for exact averaging", where)
    elif rounds == "auto":
        if spec.rho is None:
            raise ConfigError("rounds=auto needs rho", where)
        rounds = max(1, int(round(spec.rho * batch / nodes)))
    if rounds < 0:
        raise ConfigError(f"rounds must be nonnegative, got {rounds}", where)

    mu = spec.mu
    if mu == "auto":
        if config.rates is None:
            raise ConfigError("mu=auto needs a [rates] section", where)
        mu = R.discarded_per_iteration(_system_rates(config, batch, nodes, rounds))
    if spec.method in ("dsgd", "adsgd", "local_sgd", "local_asgd") and mu != 0:
        raise ConfigError(f"method {spec.method} assumes mu = 0", where)

    iterations = horizon // (batch + mu)
    if iterations < 1:
        raise ConfigError(f"horizon {horizon} too small for batch+mu = {batch + mu}", where)

    seconds = float("nan")
    if config.rates is not None:
        r = config.rates
        if spec.method in ("centralized", "centralized_accelerated"):
            seconds = batch / r["streaming"]
        elif spec.method in ("local_sgd", "local_asgd"):
            seconds = batch / (nodes * r["processing"])
        else:
            seconds = batch / (nodes * r["processing"]) + rounds / r["messaging"]
    return ResolvedAlgorithm(spec=spec, batch=batch, nodes=nodes, rounds=rounds,
                             mu=mu, iterations=iterations, seconds_per_iteration=seconds,
                             network=network if needs_net else None)


def _resolve_dgd(config, spec, network, nodes, horizon, where) -> ResolvedAlgorithm:
    """DGD keeps pace with the stream by construction: each update spans
    N/rho arriving samples.  The naive variant consumes one per node and the
    splitter drops the rest; the mini-batched variant consumes local blocks
    of 1/rho."""
    rho = spec.rho
    if rho is None or rho <= 0:
        raise ConfigError("dgd variants require rho > 0", where)
    stride_f = nodes / rho
    stride = int(round(stride_f))
    if abs(stride - stride_f) > 1e-9 * stride_f:
        raise ConfigError(f"N/rho = {stride_f} must be an integer", where)
    if spec.method == "dgd_naive":
        batch, mu = nodes, stride - nodes
    else:
        local_f = 1.0 / rho
        local = int(round(local_f))
        if abs(local - local_f) > 1e-9 * local_f:
            raise ConfigError(f"1/rho = {local_f} must be an integer", where)
        batch, mu = nodes * local, 0
    iterations = horizon // stride
    if iterations < 1:
        raise ConfigError(f"horizon {horizon} too small for DGD stride {stride}", where)
    seconds = float("nan")
    if config.rates is not None:
        seconds = stride / config.rates["streaming"]
    return ResolvedAlgorithm(spec=spec, batch=batch, nodes=nodes, rounds=1, mu=mu,
                             iterations=iterations, seconds_per_iteration=seconds,
                             network=network)


# ---------------------------------------------------------------------------
# Per-trial execution
# ---------------------------------------------------------------------------

def _default_scale(method: str, batch: int) -> float:
    if method in ("dmb", "centralized", "local_sgd"):
        target = math.log10(max(1, batch))
        best = min(_DMB_SCALE_TABLE, key=lambda kv: abs(math.log10(kv[0]) - target))
        return best[1]
    if method in ("adsgd", "local_asgd", "centralized_accelerated"):
        return 8.0
    if method == "dm_krasulina":
        return 10.0
    return 2.5


def _build_loss_model(config: ExperimentConfig, stream) -> L.LossModel:
    loss_cfg = dict(config.loss)
    kind = loss_cfg["kind"]
    dimension = getattr(stream, "dimension", None) or config.stream.get("dimension", 0)
    if kind == "pca_krasulina":
        kappa = loss_cfg.get("kappa")
        if kappa is None:
            probe = stream.fetch(np.arange(1, 2049, dtype=np.int64), lane=LANE_CALIB) \
                if stream.kind != "file" else None
            kappa = float(np.max(np.linalg.norm(probe, axis=1))) if probe is not None else 1.0
        smoothness = loss_cfg.get("smoothness", 2.0 * kappa * kappa)
        return L.LossModel(kind=kind, dimension=dimension, smoothness=smoothness,
                           data_bound=kappa, expanse=None)
    expanse = loss_cfg.get("expanse", f"{10.0 * math.sqrt(dimension)}")
    expanse = None if str(expanse).lower() == "none" else float(expanse)
    return L.LossModel(kind=kind, dimension=dimension,
                       smoothness=loss_cfg.get("smoothness"),
                       noise_variance=loss_cfg.get("sigma2"),
                       expanse=expanse)


def _calibrate(stream, model: L.LossModel, count: int = 10000):
    """Empirical (L, sigma) at w = 0 over the calibration lane."""
    idx = np.arange(1, count + 1, dtype=np.int64)
    x, y = stream.fetch(idx, lane=LANE_CALIB)
    w0 = np.zeros(model.model_dimension)
    smoothness = L.estimate_smoothness(x)
    sigma2 = L.estimate_noise_variance(model, w0, x, y)
    return smoothness, sigma2


def _build_schedule(config: ExperimentConfig, resolved: ResolvedAlgorithm,
                    stream, model: L.LossModel) -> alg.StepSchedule:
    spec = resolved.spec
    kind = spec.schedule_kind or _DEFAULT_SCHEDULES[spec.method]
    if model.kind == "pca_krasulina" and kind in ("lan_optimal", "dmb_theorem"):
        raise ConfigError("theory schedules for the eigenvector method use kind=krasulina",
                          f"[algorithm.{spec.name}] schedule")
    if kind in ("constant", "inv_sqrt", "inv_t", "adsgd_pair"):
        scale = spec.scale if spec.scale is not None else _default_scale(spec.method, resolved.batch)
        return alg.StepSchedule(kind=kind, scale=scale)
    if kind in ("lan_optimal", "dmb_theorem"):
        smoothness, sigma2 = model.smoothness, model.noise_variance
        if smoothness is None or sigma2 is None:
            if stream.kind == "file":
                raise ConfigError("file streams need explicit smoothness/sigma2 for theory schedules",
                                  f"[algorithm.{spec.name}] schedule")
            est_l, est_s = _calibrate(stream, model)
            smoothness = smoothness if smoothness is not None else est_l
            sigma2 = sigma2 if sigma2 is not None else est_s
        if model.expanse is None:
            raise ConfigError("theory schedules need a bounded model space (expanse)",
                              f"[algorithm.{spec.name}] schedule")
        return alg.StepSchedule(kind=kind, smoothness=smoothness, sigma=math.sqrt(sigma2),
                                expanse=model.expanse, horizon=resolved.iterations)
    # krasulina theory schedule
    truth = getattr(stream, "truth", None)
    gap = truth.spectrum.gap if truth is not None and hasattr(truth, "spectrum") else None
    if gap is None or gap <= 0:
        raise ConfigError("krasulina schedule needs a stream with a positive spectral gap",
                          f"[algorithm.{spec.name}] schedule")
    c0 = spec.c0 if spec.c0 is not None else 4.0
    scale = c0 / (2.0 * gap)
    offset = spec.offset
    if offset == "auto":
        cov_noise = None
        if model.noise_variance is not None:
            cov_noise = model.noise_variance / resolved.batch
        else:
            idx = np.arange(1, 2049, dtype=np.int64)
            z = stream.fetch(idx, lane=LANE_CALIB)
            cov_noise = L.estimate_noise_variance(model, np.zeros(model.dimension), z) / resolved.batch
        offset = alg.krasulina_offset_minibatch(model.dimension, model.data_bound or 1.0,
                                                spec.delta, scale, cov_noise)
    return alg.StepSchedule(kind="krasulina", c0=c0, gap=gap, offset=float(offset))


def run_trial(config: ExperimentConfig, resolved: ResolvedAlgorithm, trial: int,
              trace: dict | None = None) -> list[RunRecord]:
    """Execute one (algorithm, trial) cell; deterministic in (config, trial)."""
    stream_cfg = dict(config.stream)
    kind = stream_cfg.pop("kind")
    dimension = stream_cfg.pop("dimension", 0)
    seed = derive_seed(config.seed, trial)
    stream = make_stream(kind, dimension, seed, **stream_cfg)
    model = _build_loss_model(config, stream)
    evaluator = alg.MetricEvaluator(stream, model, holdout=config.holdout)
    schedule = _build_schedule(config, resolved, stream, model)
    plan = SplitPlan(batch=resolved.batch, nodes=resolved.nodes, discarded=resolved.mu)
    cfg = alg.TrialConfig(
        algorithm=resolved.spec.name,
        method=resolved.spec.method,
        trial=trial,
        stream=stream,
        loss_model=model,
        plan=plan,
        schedule=schedule,
        iterations=resolved.iterations,
        evaluator=evaluator,
        network=resolved.network,
        rounds=resolved.rounds,
        seconds_per_iteration=resolved.seconds_per_iteration,
        krasulina_aggregate=resolved.spec.aggregate,
        init_seed=seed,
    )
    return alg.run(cfg, trace)


def _trial_task(args) -> tuple[int, int, list[RunRecord]]:
    config, resolved, algo_index, trial = args
    try:
        return algo_index, trial, run_trial(config, resolved, trial)
    except Exception as exc:
        raise RuntimeError(f"trial {trial} of algorithm "
                           f"{resolved.spec.name!r} failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Experiment driver and aggregation
# ---------------------------------------------------------------------------

def _nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    rank = max(1, math.ceil(q * sorted_values.shape[0]))
    return float(sorted_values[rank - 1])


def run_experiment(config: ExperimentConfig, workers: int | None = None,
                   tag: str = "", keep_raw: bool = False) -> Results:
    """Run the trial x algorithm grid and aggregate across trials.

    mean/median/10%/90% quantiles (nearest rank) are computed per
    (algorithm, checkpoint, metric).  Results carry rows in config order and
    are independent of the worker count.
    """
    network = build_network(config)
    resolved = [resolve_algorithm(config, spec, network) for spec in config.algorithms]
    n_workers = config.workers if workers is None else workers
    tasks = [(config, res, ai, trial)
             for ai, res in enumerate(resolved)
             for trial in range(config.trials)]
    cells: list[list[list[RunRecord] | None]] = [[None] * config.trials for _ in resolved]
    if n_workers and n_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for ai, trial, records in pool.map(_trial_task, tasks, chunksize=1):
                cells[ai][trial] = records
    else:
        for task in tasks:
            ai, trial, records = _trial_task(task)
            cells[ai][trial] = records
    name = config.name + tag
    rows: list[ResultRow] = []
    raw: list[RunRecord] = []
    for ai, res in enumerate(resolved):
        trials = cells[ai]
        template = trials[0]
        if keep_raw:
            for records in trials:
                raw.extend(records)
        for ri, rec in enumerate(template):
            for mi, (metric, _) in enumerate(rec.metrics):
                values = np.array([trials[k][ri].metrics[mi][1] for k in range(config.trials)])
                ordered = np.sort(values)
                label = metric if rec.node in ("node", "agg") else f"{metric}_{rec.node}"
                rows.append(ResultRow(
                    experiment=name, algorithm=res.spec.name, batch=res.batch,
                    nodes=res.nodes, rounds=res.rounds, mu=res.mu,
                    trial_count=config.trials, iteration=rec.iteration,
                    samples=rec.samples, sim_seconds=rec.sim_seconds, metric=label,
                    mean=float(values.mean()), median=_nearest_rank(ordered, 0.5),
                    q10=_nearest_rank(ordered, 0.1), q90=_nearest_rank(ordered, 0.9)))
    return Results(experiment=name, rows=rows,
                   algorithm_order=[r.spec.name for r in resolved],
                   raw=raw if keep_raw else None)


def merge_results(parts: list[Results]) -> Results:
    rows = [row for part in parts for row in part.rows]
    order = []
    for part in parts:
        for name in part.algorithm_order:
            if name not in order:
                order.append(name)
    raw = None
    if any(part.raw for part in parts):
        raw = [rec for part in parts for rec in (part.raw or [])]
    return Results(experiment=parts[0].experiment, rows=rows, algorithm_order=order, raw=raw)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return f"{value:.17g}"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit_csv(results: Results, path: str | Path) -> Path:
    """Aggregated results as CSV, 17 significant digits, atomic write."""
    if not results.rows:
        raise ValueError("no results to write")
    lines = [CSV_HEADER]
    for r in results.rows:
        lines.append(",".join([
            r.experiment, r.algorithm, str(r.batch), str(r.nodes), str(r.rounds),
            str(r.mu), str(r.trial_count), str(r.iteration), str(r.samples),
            _fmt(r.sim_seconds), r.metric, _fmt(r.mean), _fmt(r.median),
            _fmt(r.q10), _fmt(r.q90)]))
    path = Path(path)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


def emit_raw_csv(results: Results, path: str | Path) -> Path:
    """Per-trial records without aggregation (raw dump mode)."""
    if not results.raw:
        raise ValueError("no raw records to write (run with keep_raw)")
    by_name = {}
    for row in results.rows:
        by_name[row.algorithm] = row
    lines = [RAW_CSV_HEADER]
    for rec in results.raw:
        meta = by_name[rec.algorithm]
        for metric, value in rec.metrics:
            label = metric if rec.node in ("node", "agg") else f"{metric}_{rec.node}"
            lines.append(",".join([
                results.experiment, rec.algorithm, str(meta.batch), str(meta.nodes),
                str(meta.rounds), str(meta.mu), str(rec.trial), str(rec.iteration),
                str(rec.samples), _fmt(rec.sim_seconds), label, _fmt(value)]))
    path = Path(path)
    _atomic_write(path, "\n".join(lines) + "\n")
    return path


@dataclass(frozen=True)
class PlotSpec:
    """What to draw: one curve per algorithm for a single metric."""

    metric: str | None = None       # default: excess_risk if present else first metric
    x: str = "t_prime"              # t_prime | t | sim_seconds
    title: str | None = None
    xlabel: str | None = None
    ylabel: str | None = None
    logx: bool = True
    logy: bool = True


_X_LABELS = {"t_prime": "samples arrived t'", "t": "iteration t", "sim_seconds": "simulated seconds"}


def emit_plot(results: Results, path: str | Path, spec: PlotSpec = PlotSpec()) -> Path:
    """Render the metric curves to a vector-graphics file next to the CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not results.rows:
        raise ValueError("no results to plot")
    metrics = []
    for row in results.rows:
        if row.metric not in metrics:
            metrics.append(row.metric)
    metric = spec.metric or ("excess_risk" if "excess_risk" in metrics else metrics[0])
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for name in results.algorithm_order:
        rows = [r for r in results.rows if r.algorithm == name and r.metric == metric]
        if not rows:
            continue
        if spec.x == "t":
            xs = [r.iteration for r in rows]
        elif spec.x == "sim_seconds":
            xs = [r.sim_seconds for r in rows]
        else:
            xs = [r.samples for r in rows]
        ax.plot(xs, [r.mean for r in rows], label=name, linewidth=1.2)
    if spec.logx:
        ax.set_xscale("log")
    if spec.logy:
        ax.set_yscale("log")
    ax.set_xlabel(spec.xlabel or _X_LABELS.get(spec.x, spec.x))
    ax.set_ylabel(spec.ylabel or metric)
    ax.set_title(spec.title or results.experiment)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None})
    plt.close(fig)
    return path


def results_from_csv(path: str | Path) -> Results:
    """Load a previously emitted aggregate CSV (for the plot subcommand)."""
    import csv as _csv

    rows = []
    order: list[str] = []
    with open(path, newline="") as handle:
        reader = _csv.DictReader(handle)
        expected = CSV_HEADER.split(",")
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for rec in reader:
            rows.append(ResultRow(
                experiment=rec["experiment"], algorithm=rec["algorithm"],
                batch=int(rec["B"]), nodes=int(rec["N"]), rounds=int(rec["R"]),
                mu=int(rec["mu"]), trial_count=int(rec["trial_count"]),
                iteration=int(rec["t"]), samples=int(rec["t_prime"]),
                sim_seconds=float(rec["sim_seconds"]), metric=rec["metric"],
                mean=float(rec["mean"]), median=float(rec["median"]),
                q10=float(rec["q10"]), q90=float(rec["q90"])))
            if rec["algorithm"] not in order:
                order.append(rec["algorithm"])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Results(experiment=rows[0].experiment, rows=rows, algorithm_order=order)
