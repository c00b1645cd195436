import math
from collections import defaultdict
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agglearn import _hashing
from agglearn.aggregation import (PrivacyParams, add_gaussian_noise, aggregate, build_report,
                                  calibrate_sigma, estimate_raw_count, l2_sensitivity,
                                  read_report, reparameterize, threshold_report,
                                  unreparameterize, write_report)
from agglearn.data import GranularDataset, load_granular_csv
from agglearn.encoding import FeatureIndexMap, HashedEncoder, HashedEncoderConfig
from agglearn.errors import EncodingError, ReportStateError

from conftest import random_dataset


def brute_force_tables(data):
    """GROUP BY over every single feature and feature pair, by dictionary counting."""
    out = defaultdict(lambda: [0, 0, 0])
    F = data.num_features
    for x, c, s in zip(data.features.tolist(), data.clicks.tolist(), data.sales.tolist()):
        keys = [("single", i, x[i]) for i in range(F)]
        keys += [("pair", i, j, x[i], x[j]) for i, j in combinations(range(F), 2)]
        for k in keys:
            out[k][0] += 1
            out[k][1] += c
            out[k][2] += s
    return out


def report_as_tables(report):
    enc = report.encoder
    out = {}
    for coord, d, c, s in zip(report.coords.tolist(), *report.counts()):
        key = enc.decode(coord)
        key = ("single",) + key if len(key) == 2 else ("pair",) + key
        out[key] = [d, c, s]
    return out


def test_toy_pair_counts(toy_csv):
    data, schema = load_granular_csv(toy_csv)
    rep = aggregate(data, FeatureIndexMap(schema.cardinality))
    tables = report_as_tables(rep)
    f1, f2 = schema.vocab[0]["8"], schema.vocab[1]["B"]
    assert tables[("pair", 0, 1, f1, f2)] == [2, 1, 1]
    assert tables == {k: v for k, v in brute_force_tables(data).items()}


def test_matches_brute_force_on_random_data():
    rng = np.random.default_rng(3)
    data = random_dataset(rng, [3, 4, 2, 5], 400)
    rep = aggregate(data, FeatureIndexMap([3, 4, 2, 5]))
    assert report_as_tables(rep) == dict(brute_force_tables(data))


def test_empty_dataset():
    data = GranularDataset(np.zeros((0, 2), dtype=int), [], [])
    rep = aggregate(data, FeatureIndexMap([2, 2]))
    assert len(rep) == 0


def test_no_positives():
    rng = np.random.default_rng(0)
    data = random_dataset(rng, [3, 3], 50, rate=0.0)
    rep = aggregate(data, FeatureIndexMap([3, 3]))
    assert np.all(rep.clicks == 0) and np.all(rep.sales == 0) and np.all(rep.displays > 0)


def test_encoder_mismatch():
    data = GranularDataset(np.zeros((3, 2), dtype=int), [0, 0, 0], [0, 0, 0])
    with pytest.raises(EncodingError):
        aggregate(data, FeatureIndexMap([2, 2, 2]))


def test_single_tables_sum_to_rows():
    rng = np.random.default_rng(1)
    data = random_dataset(rng, [3, 4, 5], 321)
    rep = aggregate(data, FeatureIndexMap([3, 4, 5]))
    d = rep.counts()[0]
    assert d[rep.single_mask()].sum() == 3 * 321
    assert estimate_raw_count(rep) == 321


@settings(max_examples=25, deadline=None)
@given(n1=st.integers(0, 40), n2=st.integers(0, 40), seed=st.integers(0, 10_000))
def test_aggregation_is_linear(n1, n2, seed):
    rng = np.random.default_rng(seed)
    enc = FeatureIndexMap([3, 2, 4])
    a, b = random_dataset(rng, [3, 2, 4], n1), random_dataset(rng, [3, 2, 4], n2)
    ra, rb = aggregate(a, enc), aggregate(b, enc)
    rab = aggregate(GranularDataset.concat([a, b]), enc)
    for field in ("displays", "clicks", "sales"):
        summed = ra.D.__class__.from_coords(
            np.concatenate([ra.coords, rb.coords]),
            np.concatenate([getattr(ra, field), getattr(rb, field)]))
        np.testing.assert_array_equal(summed.coords, rab.coords)
        np.testing.assert_array_equal(summed.values, getattr(rab, field))


def test_unnoised_invariants():
    rng = np.random.default_rng(2)
    rep = aggregate(random_dataset(rng, [4, 4, 4], 500), FeatureIndexMap([4, 4, 4]))
    d, c, s = rep.counts()
    assert np.all(c <= d) and np.all(s <= d) and np.all(d == np.round(d))


def _toy_report(displays):
    enc = FeatureIndexMap([len(displays)])
    from agglearn.aggregation import AggregationReport
    n = len(displays)
    return AggregationReport(enc, np.arange(n), np.array(displays, float), np.zeros(n), np.zeros(n))


def test_threshold_boundary():
    rep = threshold_report(_toy_report([9, 10, 11]), 10)
    assert rep.coords.tolist() == [1, 2]
    assert rep.thresholded and rep.threshold == 10


def test_threshold_zero_is_identity():
    rep = _toy_report([0, 3, 1])
    np.testing.assert_array_equal(threshold_report(rep, 0).coords, rep.coords)


def test_threshold_toy_rows(toy_csv):
    data, schema = load_granular_csv(toy_csv)
    enc = FeatureIndexMap(schema.cardinality)
    rep = threshold_report(aggregate(data, enc), 2)
    expected = {k for k, v in brute_force_tables(data).items() if v[0] >= 2}
    assert set(report_as_tables(rep)) == expected


def test_threshold_after_noise_rejected():
    rep = add_gaussian_noise(_toy_report([5, 20]), 1.0, seed=0)
    with pytest.raises(ReportStateError):
        threshold_report(rep, 10)


def test_calibrate_sigma_closed_form():
    assert calibrate_sigma(10, 1e-10, math.sqrt(570)) == pytest.approx(16.28, abs=0.01)
    assert calibrate_sigma(10, 1e-10, math.sqrt(190)) == pytest.approx(9.40, abs=0.01)
    assert calibrate_sigma(10, 1e-10, 0.0) == 0.0
    assert PrivacyParams(10, 1e-10, math.sqrt(570)).sigma == calibrate_sigma(10, 1e-10, math.sqrt(570))


@pytest.mark.parametrize("args", [(0, 1e-5, 1), (-1, 1e-5, 1), (1, 0, 1), (1, 1, 1), (1, 1e-5, -1)])
def test_calibrate_sigma_errors(args):
    with pytest.raises(ValueError):
        calibrate_sigma(*args)


@settings(max_examples=50, deadline=None)
@given(eps=st.floats(0.01, 20), delta=st.floats(1e-12, 0.5), shrink=st.floats(0.1, 1.0))
def test_calibrate_sigma_monotone(eps, delta, shrink):
    s = calibrate_sigma(eps, delta, 3.0)
    assert calibrate_sigma(eps * shrink, delta, 3.0) >= s
    assert calibrate_sigma(eps, delta * shrink, 3.0) >= s


def test_l2_sensitivity():
    assert l2_sensitivity(190, 3, False) == math.sqrt(190 * 3)
    assert l2_sensitivity(190, 3, True) == math.sqrt(190)
    assert l2_sensitivity(1, 1, False) == 1.0
    assert l2_sensitivity(190, 3) == pytest.approx(23.87, abs=0.01)
    assert l2_sensitivity(190, 3, True) == pytest.approx(13.78, abs=0.01)


def test_zero_noise_only_sets_flag():
    rep = _toy_report([3, 4])
    noisy = add_gaussian_noise(rep, 0.0, seed=1)
    assert noisy.noised
    np.testing.assert_array_equal(noisy.displays, rep.displays)


def test_double_noise_rejected():
    rep = add_gaussian_noise(_toy_report([3]), 1.0, seed=1)
    with pytest.raises(ReportStateError):
        add_gaussian_noise(rep, 1.0, seed=2)


def test_noise_mean_and_spread():
    n = 200_000
    rep = _toy_report(np.full(n, 225.0))
    noisy = add_gaussian_noise(rep, 17.0, seed=5)
    err = noisy.displays - 225.0
    assert abs(err.mean()) < 3 * 17 / math.sqrt(n)
    assert err.std() == pytest.approx(17.0, rel=0.01)
    # negative values are kept
    assert noisy.clicks.min() < 0


def test_noise_is_keyed_on_coordinate():
    rep = _toy_report(np.full(10, 50.0))
    full = add_gaussian_noise(rep, 2.0, seed=9)
    sub = add_gaussian_noise(threshold_report(rep, 0).__class__(
        rep.encoder, rep.coords[[3, 7]], rep.displays[[3, 7]], rep.clicks[[3, 7]],
        rep.sales[[3, 7]]), 2.0, seed=9)
    np.testing.assert_array_equal(sub.displays, full.displays[[3, 7]])
    other = add_gaussian_noise(rep, 2.0, seed=10)
    assert not np.array_equal(other.displays, full.displays)


def test_counter_gaussian_pinned():
    got = _hashing.counter_gaussian(0, 0, [0, 1, 2]).tolist()
    assert got == pytest.approx([-2.1117011533696703, 1.3007526902648991, -0.5484667984900452],
                                abs=1e-15)


def test_reparameterize_arithmetic():
    from agglearn.aggregation import AggregationReport
    rep = AggregationReport(FeatureIndexMap([1]), np.array([0]), np.array([10.0]),
                            np.array([4.0]), np.array([1.0]))
    r = reparameterize(rep)
    assert (r.sales[0], r.clicks[0], r.displays[0]) == (1.0, 3.0, 6.0)
    back = unreparameterize(r)
    assert (back.displays[0], back.clicks[0], back.sales[0]) == (10.0, 4.0, 1.0)


def test_reparameterize_round_trip_and_zero_labels():
    rng = np.random.default_rng(4)
    enc = FeatureIndexMap([3, 3])
    rep = aggregate(random_dataset(rng, [3, 3], 100), enc)
    back = unreparameterize(reparameterize(rep))
    for f in ("displays", "clicks", "sales"):
        np.testing.assert_array_equal(getattr(back, f), getattr(rep, f))
    zero = reparameterize(aggregate(random_dataset(rng, [3, 3], 100, rate=0.0), enc))
    assert np.all(zero.sales == 0) and np.all(zero.clicks == 0)
    np.testing.assert_array_equal(zero.displays, zero.counts()[0])


def test_reparameterize_noised_rejected():
    with pytest.raises(ReportStateError):
        reparameterize(add_gaussian_noise(_toy_report([3]), 1.0, seed=0))


def test_estimate_raw_count_noisy_concentration():
    rng = np.random.default_rng(6)
    cards = [5, 8, 10]
    data = random_dataset(rng, cards, 5000)
    enc = FeatureIndexMap(cards)
    sigma = 30.0
    bound = 4 * sigma * math.sqrt(max(cards)) / math.sqrt(len(cards))
    for seed in range(20):
        rep = build_report(data, enc, sigma=sigma, seed=seed)
        assert abs(estimate_raw_count(rep) - 5000) < bound


def test_estimate_raw_count_empty():
    with pytest.raises(ValueError):
        estimate_raw_count(_toy_report([])[0:0] if False else _toy_report([]))


@pytest.mark.parametrize("hashed", [False, True])
def test_report_file_round_trip(tmp_path, toy_csv, hashed):
    data, schema = load_granular_csv(toy_csv)
    enc = (HashedEncoder(schema, HashedEncoderConfig(1 << 16, 3)) if hashed
           else FeatureIndexMap(schema.cardinality))
    rep = build_report(data, enc, sigma=1.5, seed=4)
    write_report(rep, schema, tmp_path / "r")
    again, schema2 = read_report(tmp_path / "r")
    assert schema2.vocab == schema.vocab
    np.testing.assert_array_equal(again.coords, rep.coords)
    for f in ("displays", "clicks", "sales"):
        np.testing.assert_array_equal(getattr(again, f), getattr(rep, f))
    assert (again.noised, again.sigma, again.seed) == (True, 1.5, 4)
    write_report(again, schema2, tmp_path / "r2")
    assert (tmp_path / "r" / "report.csv").read_bytes() == (tmp_path / "r2" / "report.csv").read_bytes()


def test_report_csv_layout(tmp_path, toy_csv):
    data, schema = load_granular_csv(toy_csv)
    write_report(aggregate(data, FeatureIndexMap(schema.cardinality)), schema, tmp_path)
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "kind,feat_i,feat_j,mod_i,mod_j,displays,clicks,sales"
    # sorted by (kind, feat_i, feat_j, mod_i, mod_j): "pair" < "single"
    assert lines[1] == "pair,0,1,0,0,2.0,1.0,0.0"
    assert lines[-1] == "single,2,,3,,1.0,0.0,0.0"
    keys = [ln.split(",")[:5] for ln in lines[1:]]
    as_tuple = [(k[0],) + tuple(int(v) if v else -1 for v in k[1:]) for k in keys]
    assert as_tuple == sorted(as_tuple)
