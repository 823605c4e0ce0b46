"""System rate model and capacity planning.

Everything here is closed-form arithmetic on the five system parameters
(streaming rate, per-node processing rate, messaging rate, node count,
network-wide mini-batch size) plus the number of consensus rounds per
iteration.  The planner answers three questions: how many mini-batches per
second the network completes (effective rate), how many communication rounds
fit between two splitting instances, and how many samples must be dropped
per iteration when the stream outruns the system.

The module also evaluates the noise-moment expressions and order-optimality
conditions that govern the inexact-averaging algorithms, so experiment
results can be compared against what the scaling analysis predicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

# Relative slack applied before floor/ceil so that rate tuples given as exact
# decimals ("1e6", "1.25e5") produce exact integer round counts despite the
# binary representation error of the intermediate arithmetic.
_INT_GUARD = 1e-9


class InfeasibleRatesError(ValueError):
    """Raised when a rate configuration leaves no room for communication."""


@dataclass(frozen=True)
class SystemRates:
    """Rates and sizes describing one distributed streaming system.

    streaming_rate   R_s, samples/second arriving at the splitter
    processing_rate  R_p, samples/second each node can process
    messaging_rate   R_c, messages/second during the communication phase
    nodes            N, compute nodes
    batch            B, network-wide mini-batch size (multiple of N)
    rounds           R, communication rounds per iteration
    """

    streaming_rate: float
    processing_rate: float
    messaging_rate: float
    nodes: int
    batch: int
    rounds: int = 1

    def __post_init__(self) -> None:
        if self.streaming_rate <= 0 or self.processing_rate <= 0 or self.messaging_rate <= 0:
            raise ValueError("all rates must be strictly positive")
        if self.nodes < 1:
            raise ValueError("nodes must be a positive integer")
        if self.batch < 1 or self.batch % self.nodes != 0:
            raise ValueError(f"batch must be a positive multiple of nodes, got B={self.batch} N={self.nodes}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass(frozen=True)
class PlannerReport:
    """One planner row for a concrete (B, R) choice."""

    batch: int
    rounds: int
    effective_rate: float       # mini-batches/second
    stream_ratio: float         # R_s / R_e
    max_rounds: int
    discarded: int              # mu, samples dropped per iteration
    mismatch: float             # rho = N*R_c/R_s - 1/R_p
    feasible: bool              # stream_ratio <= B with the chosen R
    rounds_feasible: bool       # max_rounds >= 1


def effective_rate(rates: SystemRates) -> float:
    """Mini-batches per second the system completes: (B/(N*R_p) + R/R_c)^-1."""
    compute = rates.batch / (rates.nodes * rates.processing_rate)
    communicate = rates.rounds / rates.messaging_rate
    return 1.0 / (compute + communicate)


def max_rounds(rates: SystemRates) -> int:
    """Largest round count that still keeps up with the stream.

    floor(B * R_c * (1/R_s - 1/(N*R_p))); 0 when the stream leaves no slack
    (R_s >= N*R_p), which marks the configuration infeasible for any
    aggregation that needs at least one message exchange.  The ``rounds``
    field of ``rates`` is ignored.
    """
    slack = 1.0 / rates.streaming_rate - 1.0 / (rates.nodes * rates.processing_rate)
    if slack <= 0:
        return 0
    raw = rates.batch * rates.messaging_rate * slack
    return max(0, math.floor(raw + _INT_GUARD * max(1.0, raw)))


def discarded_per_iteration(rates: SystemRates) -> int:
    """Samples dropped per splitting instance: max(0, ceil(R_s/R_e) - B).

    Uses ceil so the simulator never silently over-consumes the stream.
    """
    ratio = rates.streaming_rate / effective_rate(rates)
    whole = math.ceil(ratio - _INT_GUARD * max(1.0, ratio))
    return max(0, whole - rates.batch)


def mismatch_ratio(rates: SystemRates) -> float:
    """rho = N*R_c/R_s - 1/R_p, per-sample communications slack vs. the stream.

    May be negative; callers should report it as-is and flag infeasibility
    rather than clamping.
    """
    return rates.nodes * rates.messaging_rate / rates.streaming_rate - 1.0 / rates.processing_rate


def min_comm_rate(rates: SystemRates) -> float:
    """Messaging rate needed to finish R rounds between splits.

    N*R*R_s*R_p / (B*(N*R_p - R_s)).  Raises InfeasibleRatesError when the
    nodes cannot even process the stream (N*R_p <= R_s), since then no
    messaging rate helps.
    """
    headroom = rates.nodes * rates.processing_rate - rates.streaming_rate
    if headroom <= 0:
        raise InfeasibleRatesError(
            f"N*R_p = {rates.nodes * rates.processing_rate:g} <= R_s = {rates.streaming_rate:g}"
        )
    return (rates.nodes * rates.rounds * rates.streaming_rate * rates.processing_rate
            / (rates.batch * headroom))


def plan(rates: SystemRates, rounds: int | None = None) -> PlannerReport:
    """Evaluate one (B, R) point.

    ``rounds=None`` uses max_rounds(rates) (exact-averaging regime, spend all
    slack on communication); otherwise the given fixed R.  When even one
    round does not fit, the report keeps R = 1 so the effective rate is still
    defined, and flags the row infeasible.
    """
    r_max = max_rounds(rates)
    if rounds is None:
        r = max(1, r_max)
    else:
        r = rounds
    rated = replace(rates, rounds=max(1, r))
    r_e = effective_rate(rated)
    ratio = rates.streaming_rate / r_e
    mu = discarded_per_iteration(rated)
    rounds_ok = r_max >= 1
    return PlannerReport(
        batch=rates.batch,
        rounds=rated.rounds,
        effective_rate=r_e,
        stream_ratio=ratio,
        max_rounds=r_max,
        discarded=mu,
        mismatch=mismatch_ratio(rates),
        feasible=rounds_ok and mu == 0,
        rounds_feasible=rounds_ok,
    )


def rate_ratio_sweep(rates_template: SystemRates,
                     batch_values: Sequence[int],
                     rounds: int | None = None) -> list[PlannerReport]:
    """Planner table over a mini-batch sweep, one report per B.

    Each B must be a positive multiple of N.  ``rounds`` as in plan().
    """
    reports = []
    for b in batch_values:
        reports.append(plan(replace(rates_template, batch=int(b)), rounds=rounds))
    return reports


@dataclass(frozen=True)
class BoundEvaluator:
    """Inputs for the inexact-averaging noise-moment expressions.

    lambda2 is |lambda_2(A)| of the consensus matrix, sigma2 the per-sample
    gradient noise variance, ``step`` the stepsize eta_t in effect at
    iteration t (only the accelerated variant uses it, together with the
    smoothness constant).
    """

    lambda2: float
    sigma2: float
    batch: int
    nodes: int
    rounds: int
    iteration: int
    smoothness: float = 0.0
    expanse: float = 0.0
    step: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda2 < 1.0:
            raise ValueError("lambda2 must lie in [0, 1)")
        if min(self.sigma2, self.smoothness, self.expanse, self.step) < 0:
            raise ValueError("sigma2, smoothness, expanse, step must be nonnegative")
        if self.batch < 1 or self.nodes < 1 or self.rounds < 1 or self.iteration < 1:
            raise ValueError("batch, nodes, rounds, iteration must be positive")


def dsgd_noise_moments(be: BoundEvaluator, accelerated: bool = False) -> tuple[float, float]:
    """(Delta_t^2, Xi_t): effective gradient-noise variance and bias.

    Standard variant:
      Xi_t      = (sigma/sqrt(B/N)) * (1 + N^2 lam^R) * ((1 + N^2 lam^R)^t - 1)
      Delta_t^2 = 4 sigma^2/B
                  + 2 (sigma/sqrt(B/N))^2 (1 + N^4 lam^2R) ((1 + N^2 lam^R)^t - 1)^2
                  + 4 lam^2R sigma^2 N^3 / B

    Accelerated variant (growth factor driven by eta_t and L):
      Delta_t^2 = 2 (sigma/sqrt(B/N))^2 ((1 + 2 eta_t N^2 L lam^R)^t - 1)^2
                  + (4 sigma^2/(B/N)) (lam^2R N^2 + 1/N)
      Xi_t      = (sigma/sqrt(B/N)) * (1 + B^2 lam^R) * ((1 + 2 eta_t N^2 L lam^R)^t - 1)

    Both collapse to (4 sigma^2/B, 0) when lambda2 = 0.
    """
    lam_r = be.lambda2 ** be.rounds
    sigma = math.sqrt(be.sigma2)
    local = be.batch / be.nodes
    sig_loc = sigma / math.sqrt(local)
    n = float(be.nodes)
    if accelerated:
        growth = (1.0 + 2.0 * be.step * n * n * be.smoothness * lam_r) ** be.iteration - 1.0
        delta_sq = (2.0 * sig_loc * sig_loc * growth * growth
                    + (4.0 * be.sigma2 / local) * (lam_r * lam_r * n * n + 1.0 / n))
        xi = sig_loc * (1.0 + be.batch * be.batch * lam_r) * growth
    else:
        growth = (1.0 + n * n * lam_r) ** be.iteration - 1.0
        delta_sq = (4.0 * be.sigma2 / be.batch
                    + 2.0 * sig_loc * sig_loc * (1.0 + n ** 4 * lam_r * lam_r) * growth * growth
                    + 4.0 * lam_r * lam_r * be.sigma2 * n ** 3 / be.batch)
        xi = sig_loc * (1.0 + n * n * lam_r) * growth
    return delta_sq, xi


def dsgd_risk_bound(be: BoundEvaluator, accelerated: bool = False) -> float:
    """Excess-risk bound at iteration t for the chosen variant.

    Standard: 2L/t + sqrt(4 Delta_t^2 / t) + sqrt(1/2) Xi_t D_W / L.
    Accelerated: 8L/t^2 + 4 sqrt(4 Delta_t^2 / t) + sqrt(32) Xi_t.
    """
    delta_sq, xi = dsgd_noise_moments(be, accelerated=accelerated)
    t = be.iteration
    if accelerated:
        return 8.0 * be.smoothness / t ** 2 + 4.0 * math.sqrt(4.0 * delta_sq / t) + math.sqrt(32.0) * xi
    if be.smoothness <= 0:
        raise ValueError("standard bound needs a positive smoothness constant")
    return (2.0 * be.smoothness / t + math.sqrt(4.0 * delta_sq / t)
            + math.sqrt(0.5) * xi * be.expanse / be.smoothness)


def dmb_risk_bound(smoothness: float, sigma: float, expanse: float,
                   batch: int, discarded: int, t_prime: int) -> float:
    """Exact-averaging mini-batch excess-risk bound after t' arrived samples.

    (B + mu) * (2 D_W^2 L / t' + 2 D_W sigma / sqrt(t')).
    """
    return (batch + discarded) * (2.0 * expanse * expanse * smoothness / t_prime
                                  + 2.0 * expanse * sigma / math.sqrt(t_prime))


@dataclass(frozen=True)
class ScalingCondition:
    """One order-optimality condition evaluated with all constants set to 1."""

    name: str
    observed: float
    required: float
    kind: str  # "lower" (observed >= required) or "upper" (observed <= required)

    @property
    def passed(self) -> bool:
        if self.kind == "lower":
            return self.observed >= self.required
        return self.observed <= self.required


@dataclass(frozen=True)
class ScalingReport:
    """Soft diagnostics for the four order-optimality conditions.

    These come from asymptotic statements, so every constant is taken to be 1
    and failures are reported, never raised.
    """

    accelerated: bool
    mismatch: float
    conditions: tuple[ScalingCondition, ...]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.conditions)


def check_scaling_conditions(rates: SystemRates, lambda2: float, sigma: float,
                             t_prime: int, accelerated: bool = False) -> ScalingReport:
    """Evaluate the four scaling conditions for (accelerated) consensus SGD.

    Standard variant:
      B/N >= 1 + log(t')/(rho log(1/lam)),   B/N <= sigma sqrt(t')/N,
      R_c >= R_s log(t')/(sigma sqrt(t') log(1/lam)) + R_s/(R_p N),
      t'  >= N^2/sigma^2.
    Accelerated swaps in sigma^(1/2) (t')^(3/4) for the upper batch bound and
    the messaging bound, and N^(4/3) for the horizon bound.

    lambda2 = 0 makes the log-ratio terms vanish (log(1/0) treated as +inf),
    so the lower batch bound collapses to 1.
    """
    if t_prime < 1:
        raise ValueError("t_prime must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 <= lambda2 < 1.0:
        raise ValueError("lambda2 must lie in [0, 1)")
    rho = mismatch_ratio(rates)
    local = rates.batch / rates.nodes
    log_tp = math.log(t_prime)
    if lambda2 == 0.0:
        log_ratio = 0.0
    else:
        log_ratio = log_tp / math.log(1.0 / lambda2)
    # rho <= 0 means communications cannot keep up at all; the lower batch
    # bound is then unbounded, encoded as +inf.
    batch_lower = 1.0 + (log_ratio / rho if rho > 0 else (math.inf if log_ratio > 0 else 0.0))
    if accelerated:
        horizon_term = sigma * t_prime ** 0.75
        batch_upper = math.sqrt(sigma) * t_prime ** 0.75 / rates.nodes
        t_required = rates.nodes ** (4.0 / 3.0) / (sigma * sigma)
    else:
        horizon_term = sigma * math.sqrt(t_prime)
        batch_upper = sigma * math.sqrt(t_prime) / rates.nodes
        t_required = rates.nodes ** 2 / (sigma * sigma)
    if lambda2 == 0.0:
        comm_required = rates.streaming_rate / (rates.processing_rate * rates.nodes)
    else:
        comm_required = (rates.streaming_rate * log_tp / (horizon_term * math.log(1.0 / lambda2))
                         + rates.streaming_rate / (rates.processing_rate * rates.nodes))
    conditions = (
        ScalingCondition("local_batch_lower", local, batch_lower, "lower"),
        ScalingCondition("local_batch_upper", local, batch_upper, "upper"),
        ScalingCondition("messaging_rate", rates.messaging_rate, comm_required, "lower"),
        ScalingCondition("horizon", float(t_prime), t_required, "lower"),
    )
    return ScalingReport(accelerated=accelerated, mismatch=rho, conditions=conditions)
