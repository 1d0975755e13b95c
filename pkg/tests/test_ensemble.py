import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivefusion.dataset.synthetic import SimParams, route_profile, simulate_chapter
from drivefusion.ensemble import (
    ANGLE_BINS,
    SPEED_BINS,
    BinPrior,
    bin_index,
    build_prior,
    ensemble_series,
    plain_average,
    prior_weighted_average,
)
from drivefusion.series import AlignmentError, PredictionSeries

finite = st.floats(-170, 170, allow_nan=False, allow_infinity=False)


def series(angle, speed, n=None, chapter="c0"):
    n = len(angle) if n is None else n
    return PredictionSeries([chapter] * n, np.arange(n), np.arange(n) * 100, angle, speed)


def two_bin_prior(p_lo, p_hi):
    # bins [0, 20) and [20, 40)
    return BinPrior(0.0, 40.0, 2, (p_lo, p_hi))


# --------------------------------------------------------------------------- build_prior


def test_uniform_prior():
    prior = build_prior(np.arange(100) + 0.5, 100)
    assert np.allclose(prior.probs, 0.01, atol=1e-15)


def test_single_value_prior():
    prior = build_prior([7.0] * 25, 10)
    assert max(prior.probs) == 1.0 and sum(prior.probs) == 1.0
    assert prior.hi > prior.lo


def test_prior_matches_sort_and_count():
    values = np.random.default_rng(11).normal(0, 25, 10_000)
    prior = build_prior(values, ANGLE_BINS)
    lo, hi = values.min(), values.max()
    width = (hi - lo) / ANGLE_BINS
    counts = [0] * ANGLE_BINS
    for v in sorted(values.tolist()):
        k = 0
        while k < ANGLE_BINS - 1 and v >= lo + (k + 1) * width:
            k += 1
        counts[k] += 1
    oracle = [c / len(values) for c in counts]
    assert np.max(np.abs(np.array(prior.probs) - oracle)) <= 1e-12


def test_prior_errors():
    with pytest.raises(ValueError):
        build_prior([], 10)
    with pytest.raises(ValueError):
        build_prior([1.0, 2.0], 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=1, max_size=200), st.sampled_from([1, 7, SPEED_BINS, ANGLE_BINS]))
def test_prior_probs_sum_to_one(values, n_bins):
    prior = build_prior(values, n_bins)
    assert abs(sum(prior.probs) - 1.0) <= 1e-9
    assert min(prior.probs) >= 0.0
    assert prior.width == pytest.approx((prior.hi - prior.lo) / n_bins)


def test_prior_json_round_trip(tmp_path):
    prior = build_prior(np.random.default_rng(0).normal(size=500), 30)
    prior.save(tmp_path / "p.json")
    assert BinPrior.load(tmp_path / "p.json") == prior


def test_angle_prior_concentrates_near_zero():
    # folded |angle| mass in five coarse groups decays away from zero
    for seed in range(3):
        angles = np.concatenate([
            simulate_chapter(seed, r, c, 300, route_profile(seed, r), SimParams()).angle[:300]
            for r in range(10) for c in range(6)
        ])
        probs = np.array(build_prior(np.concatenate([angles, -angles]), ANGLE_BINS).probs)
        folded = probs[50:] + probs[:50][::-1]
        groups = folded.reshape(5, 10).sum(axis=1)
        assert np.all(np.diff(groups) < 0), groups


# --------------------------------------------------------------------------- bin_index


def test_bin_index_examples():
    prior = BinPrior(-180.0, 180.0, 100, tuple([0.01] * 100))
    assert prior.width == pytest.approx(3.6)
    assert bin_index(prior, 0.0) == 50
    assert bin_index(prior, -180.0) == 0
    assert bin_index(prior, 180.0) == 99
    assert bin_index(prior, 1e6) == 99
    assert bin_index(prior, -1e6) == 0
    assert bin_index(prior, -176.39) == 1
    assert bin_index(prior, -176.41) == 0


# --------------------------------------------------------------------------- weighted average


def test_worked_example():
    assert prior_weighted_average([10.0, 30.0], two_bin_prior(0.3, 0.1)) == 15.0


def test_identical_predictions():
    assert prior_weighted_average([4.2, 4.2, 4.2], two_bin_prior(0.0, 1.0)) == 4.2


def test_zero_prior_fallback():
    assert prior_weighted_average([10.0, 30.0], two_bin_prior(0.0, 0.0)) == 20.0


def test_empty_predictions():
    with pytest.raises(ValueError):
        prior_weighted_average([], two_bin_prior(0.5, 0.5))


def test_plain_average_examples():
    a = series([4.0, 1.0], [10.0, 20.0])
    b = series([6.0, 3.0], [30.0, 20.0])
    out = plain_average([a, b])
    assert out.angle_deg.tolist() == [5.0, 2.0] and out.speed_kmh.tolist() == [20.0, 20.0]
    same = plain_average([a, a])
    assert np.array_equal(same.angle_deg, a.angle_deg) and same.keys() == a.keys()


def test_misaligned_series():
    a = series([1.0, 2.0], [1.0, 2.0])
    b = series([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(AlignmentError):
        plain_average([a, b])
    prior = build_prior([0.0, 1.0], 10)
    with pytest.raises(AlignmentError):
        ensemble_series([a, b], prior, prior)
    shifted = PredictionSeries(["c0", "c0"], [0, 1], [0, 200], [1.0, 2.0], [1.0, 2.0])
    with pytest.raises(AlignmentError):
        plain_average([a, shifted])


def test_single_member_unchanged():
    a = series([1.5, -2.0], [3.0, 4.0])
    prior = build_prior([-5.0, 5.0], 10)
    out = ensemble_series([a], prior, prior)
    assert np.array_equal(out.angle_deg, a.angle_deg) and np.array_equal(out.speed_kmh, a.speed_kmh)


def test_ensemble_matches_brute_force():
    rng = np.random.default_rng(5)
    angle_prior = build_prior(rng.normal(0, 30, 5000), ANGLE_BINS)
    speed_prior = build_prior(rng.uniform(0, 120, 5000), SPEED_BINS)
    members = [series(rng.normal(0, 30, 100), rng.uniform(0, 120, 100)) for _ in range(4)]
    out = ensemble_series(members, angle_prior, speed_prior)
    for i in range(100):
        pa = [m.angle_deg[i] for m in members]
        ps = [m.speed_kmh[i] for m in members]
        wa = [angle_prior.probs[bin_index(angle_prior, v)] for v in pa]
        ws = [speed_prior.probs[bin_index(speed_prior, v)] for v in ps]
        ea = math.fsum(w * v for w, v in zip(wa, pa)) / math.fsum(wa) if math.fsum(wa) > 0 else np.mean(pa)
        es = math.fsum(w * v for w, v in zip(ws, ps)) / math.fsum(ws) if math.fsum(ws) > 0 else np.mean(ps)
        assert out.angle_deg[i] == pytest.approx(ea, rel=1e-12, abs=1e-12)
        assert out.speed_kmh[i] == pytest.approx(es, rel=1e-12, abs=1e-12)
        assert out.angle_deg[i] == prior_weighted_average(pa, angle_prior)
        assert out.speed_kmh[i] == prior_weighted_average(ps, speed_prior)


member_lists = st.lists(st.lists(finite, min_size=5, max_size=5), min_size=1, max_size=6)


def _prior():
    return build_prior(np.random.default_rng(2).normal(0, 40, 2000), ANGLE_BINS)


@settings(max_examples=100, deadline=None)
@given(member_lists)
def test_convexity(rows):
    members = [series(r, r) for r in rows]
    out = ensemble_series(members, _prior(), _prior())
    stack = np.array(rows)
    assert np.all(out.angle_deg >= stack.min(axis=0)) and np.all(out.angle_deg <= stack.max(axis=0))


@settings(max_examples=100, deadline=None)
@given(member_lists, st.randoms(use_true_random=False))
def test_permutation_invariance(rows, rnd):
    members = [series(r, r) for r in rows]
    shuffled = list(members)
    rnd.shuffle(shuffled)
    a = ensemble_series(members, _prior(), _prior())
    b = ensemble_series(shuffled, _prior(), _prior())
    assert np.array_equal(a.angle_deg, b.angle_deg) and np.array_equal(a.speed_kmh, b.speed_kmh)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=5, max_size=5), st.integers(1, 6))
def test_idempotence(row, k):
    members = [series(row, row) for _ in range(k)]
    out = ensemble_series(members, _prior(), _prior())
    assert np.array_equal(out.angle_deg, np.array(row)) and np.array_equal(out.speed_kmh, np.array(row))


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=5, max_size=5), st.integers(1, 6))
def test_plain_average_idempotent(row, k):
    out = plain_average([series(row, row) for _ in range(k)])
    assert np.array_equal(out.angle_deg, np.array(row))


@settings(max_examples=50, deadline=None)
@given(member_lists, st.randoms(use_true_random=False))
def test_plain_average_order_free(rows, rnd):
    members = [series(r, r) for r in rows]
    shuffled = list(members)
    rnd.shuffle(shuffled)
    assert np.array_equal(plain_average(members).speed_kmh, plain_average(shuffled).speed_kmh)
