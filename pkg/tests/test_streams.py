"""Generators, the splitter, and file ingestion."""

import math

import numpy as np
import pytest

from streamdist import streams as S
from streamdist.streams import (EndOfStreamError, FileFormat, LogisticTruth, SplitPlan,
                                kept_block, kept_span, open_file_stream, split_index,
                                write_samples)


# --- determinism ------------------------------------------------------------

def test_samples_are_pure_functions_of_seed_and_index():
    for kind, kwargs in (("logistic_gaussian", {}),
                         ("conditional_gaussian", {"noise_var": 2.0}),
                         ("gaussian_covariance", {})):
        st = S.make_stream(kind, 6, seed=31, **kwargs)
        a = st.fetch(np.array([5, 9, 100000]))
        b = st.fetch(np.array([5, 9, 100000]))
        if kind == "gaussian_covariance":
            assert np.array_equal(a, b)
        else:
            assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        # order independence: fetching an index alone gives the same sample
        lone = st.fetch(np.array([9]))
        if kind == "gaussian_covariance":
            assert np.array_equal(lone[0], a[1])
        else:
            assert np.array_equal(lone[0][0], a[0][1]) and lone[1][0] == a[1][1]


def test_different_seeds_and_lanes_differ():
    a = S.make_stream("logistic_gaussian", 4, seed=1).fetch(np.arange(1, 10))
    b = S.make_stream("logistic_gaussian", 4, seed=2).fetch(np.arange(1, 10))
    assert not np.allclose(a[0], b[0])
    st = S.make_stream("logistic_gaussian", 4, seed=1)
    train = st.fetch(np.arange(1, 10), lane=S.LANE_TRAIN)
    hold = st.fetch(np.arange(1, 10), lane=S.LANE_HOLDOUT)
    assert not np.allclose(train[0], hold[0])


def test_ground_truth_reproducible_from_seed():
    a = S.make_stream("gaussian_covariance", 8, seed=17)
    b = S.make_stream("gaussian_covariance", 8, seed=17)
    assert np.array_equal(a.truth.basis, b.truth.basis)
    assert a.truth.spectrum == b.truth.spectrum
    q = a.truth.basis
    assert np.abs(q.T @ q - np.eye(8)).max() <= 1e-10


# --- distributional sanity ---------------------------------------------------

def test_logistic_labels_balanced_under_zero_truth():
    st = S.make_stream("logistic_gaussian", 5, seed=3)
    st.truth = LogisticTruth(model=np.zeros(6))
    _, y = st.fetch(np.arange(1, 100001))
    # Bernoulli(1/2) marginal: mean within 3 standard errors of 0
    assert abs(float(y.mean())) <= 3.0 / math.sqrt(len(y))


def test_gaussian_covariance_matches_target_covariance():
    st = S.make_stream("gaussian_covariance", 6, seed=11)
    z = st.fetch(np.arange(1, 100001))
    emp = z.T @ z / z.shape[0]
    target = st.truth.basis @ np.diag(st.truth.spectrum.as_array()) @ st.truth.basis.T
    assert np.linalg.norm(emp - target) <= 0.05 * np.linalg.norm(target)
    # stated default tail: linear decay from lambda_2 down to 0.1
    lam = st.truth.spectrum.eigenvalues
    assert lam[0] == 1.0 and lam[1] == pytest.approx(0.9) and lam[-1] == pytest.approx(0.1)


def test_conditional_gaussian_class_means():
    st = S.make_stream("conditional_gaussian", 4, seed=9, noise_var=2.0)
    x, y = st.fetch(np.arange(1, 200001))
    for label, mean in ((1, st.truth.mean_pos), (-1, st.truth.mean_neg)):
        got = x[y == label].mean(axis=0)
        stderr = math.sqrt(2.0 / (y == label).sum())
        assert np.abs(got - mean).max() <= 5 * stderr


def test_per_node_substreams_have_matching_means():
    st = S.make_stream("logistic_gaussian", 3, seed=77)
    plan = SplitPlan(batch=40, nodes=4)
    idx = kept_span(plan, 1, 500)  # (500, 4, 10)
    x, _ = st.fetch(idx.reshape(-1))
    x = x.reshape(500, 4, 10, 3)
    per_node = x.transpose(1, 0, 2, 3).reshape(4, -1, 3).mean(axis=1)
    stderr = 1.0 / math.sqrt(500 * 10)
    for n in range(4):
        assert np.abs(per_node[n]).max() <= 4 * stderr


# --- splitter ----------------------------------------------------------------

def test_split_index_hand_values():
    plan = SplitPlan(batch=4, nodes=2)
    assert split_index(plan, 1, 1, 1) == 1
    assert split_index(plan, 1, 2, 2) == 4
    assert split_index(plan, 2, 1, 1) == 5
    plan_mu = SplitPlan(batch=4, nodes=2, discarded=2)
    assert split_index(plan_mu, 2, 1, 1) == 7  # indices 5, 6 dropped


def test_split_index_range_checks():
    plan = SplitPlan(batch=4, nodes=2)
    for bad in ((1, 1, 0), (1, 1, 3), (1, 0, 1), (1, 3, 1), (0, 1, 1)):
        with pytest.raises(ValueError):
            split_index(plan, *bad)
    with pytest.raises(ValueError):
        SplitPlan(batch=5, nodes=2)
    with pytest.raises(ValueError):
        SplitPlan(batch=4, nodes=2, discarded=-1)


def test_split_mapping_is_bijection_onto_kept_indices():
    horizon = 20
    for nodes in (2, 4, 8):
        for batch in (nodes, 2 * nodes, 64):
            if batch % nodes:
                continue
            for mu in (0, 1, 5):
                plan = SplitPlan(batch=batch, nodes=nodes, discarded=mu)
                seen = set()
                for t in range(1, horizon + 1):
                    for n in range(1, nodes + 1):
                        for b in range(1, batch // nodes + 1):
                            idx = split_index(plan, t, n, b)
                            assert idx not in seen
                            seen.add(idx)
                expected = set()
                for t in range(horizon):
                    start = t * (batch + mu)
                    expected.update(range(start + 1, start + batch + 1))
                assert seen == expected


def test_kept_block_and_span_agree_with_split_index():
    plan = SplitPlan(batch=12, nodes=3, discarded=4)
    block = kept_block(plan, 5)
    for n in range(1, 4):
        for b in range(1, 5):
            assert block[n - 1, b - 1] == split_index(plan, 5, n, b)
    span = kept_span(plan, 3, 4)
    for i, t in enumerate(range(3, 7)):
        assert np.array_equal(span[i], kept_block(plan, t))


# --- file streams -------------------------------------------------------------

def test_file_round_trip_is_bitwise(tmp_path, rng):
    x = rng.standard_normal((100, 4))
    y = rng.choice([-1, 1], size=100)
    path = tmp_path / "samples.csv"
    write_samples(path, x, y, FileFormat(label_column=True))
    st = open_file_stream(path, FileFormat(label_column=True))
    got_x, got_y = st.fetch(np.arange(1, 101))
    assert np.array_equal(got_x, x)   # %.17g round-trips float64 exactly
    assert np.array_equal(got_y, y)
    st.close()


def test_file_label_parsing(tmp_path):
    path = tmp_path / "one.csv"
    path.write_text("1.0,2.0,-1\n")
    st = open_file_stream(path, FileFormat(label_column=True))
    x, y = st.fetch(np.array([1]))
    assert np.array_equal(x[0], [1.0, 2.0]) and y[0] == -1


def test_file_end_of_stream(tmp_path):
    path = tmp_path / "three.csv"
    path.write_text("1\n2\n3\n")
    st = open_file_stream(path)
    st.fetch(np.array([1, 2, 3]))
    with pytest.raises(EndOfStreamError):
        st.fetch(np.array([4]))


def test_file_single_pass_and_skipping(tmp_path):
    path = tmp_path / "nums.csv"
    path.write_text("\n".join(str(i) for i in range(1, 11)) + "\n")
    st = open_file_stream(path)
    first = st.fetch(np.array([1, 2]))
    assert first.ravel().tolist() == [1.0, 2.0]
    skipped = st.fetch(np.array([5, 6]))  # rows 3, 4 are dropped silently
    assert skipped.ravel().tolist() == [5.0, 6.0]
    with pytest.raises(ValueError):
        st.fetch(np.array([6]))  # going backwards violates single-pass


def test_file_malformed_rows(tmp_path):
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1.0,2.0\n3.0\n")
    st = open_file_stream(ragged)
    with pytest.raises(ValueError, match="ragged"):
        st.fetch(np.array([1, 2]))
    alpha = tmp_path / "alpha.csv"
    alpha.write_text("1.0,abc\n")
    st = open_file_stream(alpha)
    with pytest.raises(ValueError, match="non-numeric"):
        st.fetch(np.array([1]))
    with pytest.raises(FileNotFoundError):
        open_file_stream(tmp_path / "missing.csv")


def test_file_dimension_mismatch(tmp_path):
    path = tmp_path / "wide.csv"
    path.write_text("1.0,2.0\n")
    st = open_file_stream(path, dimension=3)
    with pytest.raises(ValueError, match="dimension mismatch"):
        st.fetch(np.array([1]))


def test_file_header_skipped(tmp_path):
    path = tmp_path / "hdr.csv"
    path.write_text("x0,x1\n1.0,2.0\n")
    st = open_file_stream(path, FileFormat(header=True))
    assert st.fetch(np.array([1])).ravel().tolist() == [1.0, 2.0]


# --- misc ---------------------------------------------------------------------

def test_init_unit_vector_deterministic_unit_norm():
    a = S.init_unit_vector(5, 12)
    b = S.init_unit_vector(5, 12)
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    assert not np.allclose(a, S.init_unit_vector(6, 12))


def test_derive_seed_distinct_and_stable():
    seeds = {S.derive_seed(1234, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert S.derive_seed(1234, 7) == S.derive_seed(1234, 7)
    assert S.derive_seed(1234, 7) != S.derive_seed(1235, 7)


def test_make_stream_rejects_unknown_kind():
    with pytest.raises(ValueError):
        S.make_stream("nope", 3, seed=1)


def test_generate_single_sample_matches_block_fetch():
    st = S.make_stream("logistic_gaussian", 4, seed=2)
    x, y = S.generate(st, 17)
    bx, by = st.fetch(np.array([17]))
    assert np.array_equal(x, bx[0]) and y == by[0]
    gc = S.make_stream("gaussian_covariance", 4, seed=2)
    assert np.array_equal(S.generate(gc, 3), gc.fetch(np.array([3]))[0])
    with pytest.raises(ValueError):
        S.generate(st, 0)
