"""Schedules, reference updates, runner equivalences, and bookkeeping."""

import math

import numpy as np
import pytest

from streamdist import algorithms as A
from streamdist import losses as L
from streamdist import network as N
from streamdist import streams as S
from streamdist.records import checkpoint_grid


def logistic_setup(seed=123, d=5, holdout=0):
    stream = S.make_stream("logistic_gaussian", d, seed=seed)
    model = L.LossModel(kind="logistic", dimension=d, expanse=10 * math.sqrt(d))
    evaluator = A.MetricEvaluator(stream, model, holdout=holdout)
    return stream, model, evaluator


def trial_config(method, stream, model, evaluator, plan, schedule, iterations,
                 network=None, rounds=1, seconds=float("nan"), aggregate="listing"):
    return A.TrialConfig(algorithm=method, method=method, trial=0, stream=stream,
                         loss_model=model, plan=plan, schedule=schedule,
                         iterations=iterations, evaluator=evaluator, network=network,
                         rounds=rounds, seconds_per_iteration=seconds,
                         krasulina_aggregate=aggregate)


def iterate_trace(cfg):
    trace = {}
    records = A.run(cfg, trace)
    return np.array(trace["iterates"]), records


# --- schedules ----------------------------------------------------------------

def test_schedule_values():
    assert A.StepSchedule("constant", scale=0.3).step(9) == 0.3
    assert A.StepSchedule("inv_sqrt", scale=2.0).step(4) == 1.0
    assert A.StepSchedule("inv_t", scale=10.0).step(5) == 2.0
    lan = A.StepSchedule("lan_optimal", smoothness=2.0, sigma=1.0, expanse=4.0, horizon=8)
    assert lan.step(3) == min(1 / 4.0, 4.0 / math.sqrt(16.0))
    dmb = A.StepSchedule("dmb_theorem", smoothness=2.0, sigma=3.0, expanse=1.5)
    assert dmb.step(9) == pytest.approx(1.0 / (2.0 + (3.0 / 1.5) * 3.0))
    kas = A.StepSchedule("krasulina", c0=4.0, gap=0.1, offset=100.0)
    assert kas.step(1) == pytest.approx(4.0 / (2 * 0.1) / 101.0)
    pair = A.StepSchedule("adsgd_pair", scale=8.0)
    assert pair.step(3) == pytest.approx(8.0 / 8.0)
    assert pair.momentum(1) == 1.0 and pair.momentum(2) == 1.0 and pair.momentum(6) == 3.0
    assert A.StepSchedule("inv_sqrt", scale=1.0).momentum(10) == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        A.StepSchedule("nope")
    with pytest.raises(ValueError):
        A.StepSchedule("inv_sqrt", scale=0.0)
    with pytest.raises(ValueError):
        A.StepSchedule("krasulina", c0=2.0, gap=0.1, offset=10.0)
    with pytest.raises(ValueError):
        A.StepSchedule("lan_optimal", smoothness=1.0, sigma=1.0, expanse=1.0)
    with pytest.raises(ValueError):
        A.StepSchedule("constant").step(0)


def test_krasulina_offsets_match_direct_formulas():
    d, kappa, delta, c = 10, 2.0, 0.1, 20.0
    single = A.krasulina_offset_single(d, kappa, delta, c)
    assert single == pytest.approx(
        512 * math.e ** 2 * d * d * kappa ** 4 * c * c / delta ** 4 * math.log(40.0))
    combo = A.krasulina_offset_minibatch(d, kappa, delta, c, covariance_noise=0.5)
    q1 = 64 * math.e * d * kappa ** 4 * c * c / delta ** 2 * math.log(40.0)
    q2 = 512 * math.e ** 2 * d * d * 0.5 * c * c / delta ** 4 * math.log(40.0)
    assert combo == pytest.approx(q1 + q2)


# --- reference single-step updates ---------------------------------------------

def test_centralized_sgd_step_reference_cases():
    state = A.AveragedState(iterate=np.zeros(2))
    state = A.centralized_sgd_step(state, np.array([1.0, 0.0]), eta=1.0, expanse=10.0)
    assert np.allclose(state.iterate, [-1.0, 0.0])
    # zero gradient: iterate unchanged, average equals the fixed point
    still = A.centralized_sgd_step(state, np.zeros(2), eta=0.5, expanse=10.0)
    assert np.allclose(still.iterate, state.iterate)
    assert np.allclose(still.average, state.iterate)


def test_constant_step_average_is_plain_mean(rng):
    state = A.AveragedState(iterate=np.zeros(3))
    iterates = []
    for _ in range(7):
        state = A.centralized_sgd_step(state, rng.standard_normal(3), eta=0.2, expanse=None)
        iterates.append(state.iterate)
    assert np.allclose(state.average, np.mean(iterates, axis=0), rtol=1e-12)


def test_accelerated_step_hand_computed():
    state = A.AcceleratedState(v=np.zeros(2), w=np.zeros(2))
    eta = 0.7
    state = A.accelerated_sgd_step(state, np.array([1.0, 0.0]), eta=eta, beta=1.0, expanse=10.0)
    assert np.allclose(state.v, [-eta, 0.0])
    assert np.allclose(state.w, [-eta, 0.0])


def test_accelerated_with_unit_momentum_is_projected_sgd(rng):
    grads = rng.standard_normal((20, 3))
    acc = A.AcceleratedState(v=np.zeros(3), w=np.zeros(3))
    plain = A.AveragedState(iterate=np.zeros(3))
    for g in grads:
        acc = A.accelerated_sgd_step(acc, g, eta=0.1, beta=1.0, expanse=1.5)
        plain = A.centralized_sgd_step(plain, g, eta=0.1, expanse=1.5)
        assert np.allclose(acc.w, plain.iterate, atol=1e-15)


def test_accelerated_zero_gradient_stays_at_origin():
    state = A.AcceleratedState(v=np.zeros(2), w=np.zeros(2))
    for t in range(1, 10):
        state = A.accelerated_sgd_step(state, np.zeros(2), eta=0.3,
                                       beta=max(1.0, t / 2), expanse=None)
    assert np.all(state.w == 0.0) and np.all(state.v == 0.0)


# --- exact-averaging equivalences ----------------------------------------------

def test_dmb_equals_centralized_minibatch_sgd():
    stream, model, ev = logistic_setup()
    sched = A.StepSchedule("inv_sqrt", scale=0.5)
    dmb, _ = iterate_trace(trial_config("dmb", stream, model, ev,
                                        S.SplitPlan(8, 4), sched, 100))
    cen, _ = iterate_trace(trial_config("centralized", stream, model, ev,
                                        S.SplitPlan(8, 1), sched, 100))
    scale = np.abs(cen).max()
    assert np.abs(dmb - cen).max() / scale <= 1e-10


def test_dmb_single_node_single_sample_equals_centralized():
    stream, model, ev = logistic_setup(seed=9)
    sched = A.StepSchedule("inv_sqrt", scale=0.2)
    dmb, _ = iterate_trace(trial_config("dmb", stream, model, ev,
                                        S.SplitPlan(1, 1), sched, 300))
    cen, _ = iterate_trace(trial_config("centralized", stream, model, ev,
                                        S.SplitPlan(1, 1), sched, 300))
    assert np.abs(dmb - cen).max() <= 1e-12


def test_dm_krasulina_equals_centralized_minibatch():
    stream = S.make_stream("gaussian_covariance", 10, seed=42)
    model = L.LossModel(kind="pca_krasulina", dimension=10, smoothness=2.0, data_bound=8.0)
    ev = A.MetricEvaluator(stream, model)
    sched = A.StepSchedule("inv_t", scale=10.0)
    for aggregate in ("mean", "listing"):
        dist, _ = iterate_trace(trial_config("dm_krasulina", stream, model, ev,
                                             S.SplitPlan(8, 4), sched, 100,
                                             aggregate=aggregate))
        if aggregate == "mean":
            cen, _ = iterate_trace(trial_config("centralized", stream, model, ev,
                                                S.SplitPlan(8, 4), sched, 100,
                                                aggregate="mean"))
        else:
            # listing aggregate folds a B/N factor into the effective stepsize
            cen, _ = iterate_trace(trial_config("centralized", stream, model, ev,
                                                S.SplitPlan(8, 4),
                                                A.StepSchedule("inv_t", scale=10.0 * 2),
                                                100, aggregate="mean"))
        scale = np.abs(cen).max()
        assert np.abs(dist - cen).max() / scale <= 1e-10


def test_dm_krasulina_iterate_norms_nondecreasing():
    stream = S.make_stream("gaussian_covariance", 10, seed=4)
    model = L.LossModel(kind="pca_krasulina", dimension=10, data_bound=8.0, smoothness=2.0)
    ev = A.MetricEvaluator(stream, model)
    for plan in (S.SplitPlan(1, 1), S.SplitPlan(20, 4)):
        tr, _ = iterate_trace(trial_config("dm_krasulina", stream, model, ev, plan,
                                           A.StepSchedule("inv_t", scale=10.0), 200))
        norms = np.linalg.norm(tr, axis=1)
        assert np.all(np.diff(norms) >= -1e-12 * norms[:-1])


class _ParallelStream:
    """All samples are multiples of e_1 (duck-typed covariance stream)."""

    kind = "gaussian_covariance"

    def __init__(self, dimension):
        self.dimension = dimension
        self.seed = 1
        basis = np.eye(dimension)
        self.truth = S.CovarianceTruth(
            spectrum=L.SpectrumSpec(tuple([1.0] + [0.0] * (dimension - 1))), basis=basis)

    def fetch(self, indices, lane=0):
        indices = np.asarray(indices).ravel()
        z = np.zeros((indices.shape[0], self.dimension))
        z[:, 0] = 1.0 + 0.1 * (indices % 7)
        return z


def test_dm_krasulina_parallel_samples_are_fixed_point(monkeypatch):
    stream = _ParallelStream(6)
    model = L.LossModel(kind="pca_krasulina", dimension=6, data_bound=2.0, smoothness=1.0)
    ev = A.MetricEvaluator(stream, model)
    e1 = np.zeros(6)
    e1[0] = 1.0
    monkeypatch.setattr(A, "init_unit_vector", lambda seed, d: e1.copy())
    tr, _ = iterate_trace(trial_config("dm_krasulina", stream, model, ev,
                                       S.SplitPlan(8, 4), A.StepSchedule("inv_t", scale=5.0), 50))
    assert np.abs(tr - e1).max() <= 1e-14


# --- consensus methods -----------------------------------------------------------

def test_dsgd_on_complete_uniform_graph_matches_dmb():
    stream, model, ev = logistic_setup()
    sched = A.StepSchedule("inv_sqrt", scale=0.5)
    net = N.build_topology("complete", 4, weight_rule="uniform")
    dsgd, _ = iterate_trace(trial_config("dsgd", stream, model, ev,
                                         S.SplitPlan(8, 4), sched, 100, network=net, rounds=1))
    dmb, _ = iterate_trace(trial_config("dmb", stream, model, ev,
                                        S.SplitPlan(8, 4), sched, 100))
    scale = np.abs(dmb).max()
    for node in range(4):
        assert np.abs(dsgd[:, node, :] - dmb).max() / scale <= 1e-10


def test_dsgd_without_communication_single_node_is_centralized():
    stream, model, ev = logistic_setup(seed=31)
    sched = A.StepSchedule("inv_sqrt", scale=0.4)
    single = N.NetworkModel(nodes=1, edges=(), weights=np.array([[1.0]]), lambda2=0.0)
    dsgd, _ = iterate_trace(trial_config("dsgd", stream, model, ev,
                                         S.SplitPlan(4, 1), sched, 80, network=single, rounds=0))
    cen, _ = iterate_trace(trial_config("centralized", stream, model, ev,
                                        S.SplitPlan(4, 1), sched, 80))
    assert np.abs(dsgd[:, 0, :] - cen).max() <= 1e-12


def test_adsgd_unit_momentum_matches_dsgd_updates():
    stream, model, ev = logistic_setup(seed=77)
    sched = A.StepSchedule("inv_sqrt", scale=0.4)  # momentum() == 1 for this kind
    net = N.build_topology("ring", 4)
    adsgd, _ = iterate_trace(trial_config("adsgd", stream, model, ev,
                                          S.SplitPlan(8, 4), sched, 60, network=net, rounds=2))
    dsgd, _ = iterate_trace(trial_config("dsgd", stream, model, ev,
                                         S.SplitPlan(8, 4), sched, 60, network=net, rounds=2))
    assert np.abs(adsgd - dsgd).max() <= 1e-12


def test_adsgd_single_node_matches_centralized_accelerated():
    stream, model, ev = logistic_setup(seed=15)
    sched = A.StepSchedule("adsgd_pair", scale=8.0)
    single = N.NetworkModel(nodes=1, edges=(), weights=np.array([[1.0]]), lambda2=0.0)
    adsgd, _ = iterate_trace(trial_config("adsgd", stream, model, ev,
                                          S.SplitPlan(4, 1), sched, 80, network=single, rounds=1))
    cen, _ = iterate_trace(trial_config("centralized_accelerated", stream, model, ev,
                                        S.SplitPlan(4, 1), sched, 80))
    assert np.abs(adsgd[:, 0, :] - cen).max() <= 1e-12


def test_node_disagreement_shrinks_with_more_rounds():
    stream, model, ev = logistic_setup(seed=2, d=4)
    net = N.build_topology("ring", 8)
    sched = A.StepSchedule("inv_sqrt", scale=1.0)
    spreads = []
    for rounds in (1, 2, 4, 8):
        total = 0.0
        for trial in range(20):
            st = S.make_stream("logistic_gaussian", 4, seed=S.derive_seed(5, trial))
            evt = A.MetricEvaluator(st, model, holdout=0)
            tr, _ = iterate_trace(trial_config("dsgd", st, model, evt,
                                               S.SplitPlan(16, 8), sched, 30,
                                               network=net, rounds=rounds))
            final = tr[-1]
            dists = [np.linalg.norm(final[i] - final[j])
                     for i in range(8) for j in range(i + 1, 8)]
            total += max(dists)
        spreads.append(total / 20)
    assert all(a > b for a, b in zip(spreads, spreads[1:]))
    assert spreads[0] > 1e-6  # finite R with lambda2 > 0 leaves real disagreement


# --- baselines --------------------------------------------------------------------

def test_local_sgd_single_node_is_centralized():
    stream, model, ev = logistic_setup(seed=8)
    sched = A.StepSchedule("inv_sqrt", scale=0.3)
    local, _ = iterate_trace(trial_config("local_sgd", stream, model, ev,
                                          S.SplitPlan(6, 1), sched, 60))
    cen, _ = iterate_trace(trial_config("centralized", stream, model, ev,
                                        S.SplitPlan(6, 1), sched, 60))
    assert np.abs(local[:, 0, :] - cen).max() <= 1e-12


def test_dgd_minibatch_single_node_is_minibatch_sgd():
    stream, model, ev = logistic_setup(seed=18)
    sched = A.StepSchedule("inv_sqrt", scale=0.3)
    single = N.NetworkModel(nodes=1, edges=(), weights=np.array([[1.0]]), lambda2=0.0)
    dgd, _ = iterate_trace(trial_config("dgd_minibatch", stream, model, ev,
                                        S.SplitPlan(8, 1), sched, 60, network=single))
    cen, _ = iterate_trace(trial_config("centralized", stream, model, ev,
                                        S.SplitPlan(8, 1), sched, 60))
    assert np.abs(dgd[:, 0, :] - cen).max() <= 1e-12


def test_dgd_naive_mixes_iterates_and_discards():
    stream, model, ev = logistic_setup(seed=25, d=3)
    net = N.build_topology("ring", 4)
    plan = S.SplitPlan(batch=4, nodes=4, discarded=4)  # rho = 1/2 accounting
    cfg = trial_config("dgd_naive", stream, model, ev, plan,
                       A.StepSchedule("inv_sqrt", scale=0.3), 20, network=net)
    trace = {}
    records = A.run(cfg, trace)
    assert records[-1].samples == 20 * 8  # arrived includes the dropped half
    assert records[-1].discarded_total == 20 * 4
    # one mixing round per update: reproduce the first update by hand
    x, y = stream.fetch(S.kept_block(plan, 1).reshape(-1))
    g = np.stack([L.batch_gradient(model, np.zeros(4), x[i:i + 1], y[i:i + 1])
                  for i in range(4)])
    by_hand = net.weights @ np.zeros((4, 4)) - cfg.schedule.step(1) * g
    assert np.abs(np.array(trace["iterates"])[0] - by_hand).max() <= 1e-12


# --- bookkeeping -------------------------------------------------------------------

def test_records_clock_sample_and_discard_accounting():
    stream, model, ev = logistic_setup(seed=44)
    spi = 100 / (4 * 1.25e5) + 3 / 1e4
    cfg = trial_config("dmb", stream, model, ev, S.SplitPlan(100, 4, discarded=20),
                       A.StepSchedule("inv_sqrt", scale=0.5), 50, rounds=3, seconds=spi)
    records = A.run(cfg)
    for rec in records:
        assert rec.sim_seconds == rec.iteration * spi
        assert rec.samples == rec.iteration * 120
        assert rec.discarded_total == rec.iteration * 20
    assert [r.iteration for r in records] == checkpoint_grid(50)


def test_projection_constraint_holds_every_iteration():
    stream = S.make_stream("logistic_gaussian", 5, seed=66)
    model = L.LossModel(kind="logistic", dimension=5, expanse=0.5)  # binding radius
    ev = A.MetricEvaluator(stream, model, holdout=0)
    for method, plan in (("dmb", S.SplitPlan(8, 4)), ("dmb", S.SplitPlan(1, 1)),
                         ("centralized", S.SplitPlan(8, 1))):
        tr, _ = iterate_trace(trial_config(method, stream, model, ev, plan,
                                           A.StepSchedule("constant", scale=2.0), 40))
        norms = np.linalg.norm(tr, axis=-1)
        assert norms.max() <= 0.5 * (1 + 1e-12)


def test_checkpoint_grid_shape():
    assert checkpoint_grid(5) == [1, 2, 3, 4, 5]
    grid = checkpoint_grid(100000)
    assert grid[:1000] == list(range(1, 1001))
    assert grid[-1] == 100000
    assert len(grid) == len(set(grid))
    assert all(a < b for a, b in zip(grid, grid[1:]))
    # logarithmic thinning after the dense prefix
    tail = [g for g in grid if g > 1000]
    assert len(tail) < 60


def test_metric_evaluator_fields():
    stream = S.make_stream("gaussian_covariance", 8, seed=3)
    model = L.LossModel(kind="pca_krasulina", dimension=8, data_bound=5.0, smoothness=1.0)
    ev = A.MetricEvaluator(stream, model)
    top = stream.truth.basis[:, 0]
    metrics = dict(ev.evaluate(2.0 * top))
    assert metrics["excess_risk"] <= 1e-12
    assert metrics["param_error"] <= 1e-12
    stream2, model2, ev2 = logistic_setup(seed=12, holdout=256)
    w = stream2.truth.model
    metrics = dict(ev2.evaluate(w))
    assert metrics["param_error"] == 0.0
    assert metrics["excess_risk"] == 0.0  # paired estimate at the truth itself
