import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from agglearn.agg_logistic import TrainConfig, predict
from agglearn.aggregation import AggregationReport, build_report
from agglearn.data import GranularDataset, SyntheticSpec, generate_synthetic
from agglearn.encoding import FeatureIndexMap, HashedEncoder, HashedEncoderConfig
from agglearn.enrichment import (EnrichConfig, compute_ctr_table, enrich, predict_enriched,
                                 read_enriched_model, train_enriched, write_enriched_csv,
                                 write_enriched_model)
from agglearn.evaluation import nce
from agglearn.skyline import train_skyline

from conftest import random_dataset


def _one_entry(d, c):
    enc = FeatureIndexMap([1])
    return AggregationReport(enc, np.array([0]), np.array([d]), np.array([c]), np.zeros(1))


def test_rate_examples():
    assert compute_ctr_table(_one_entry(1000, 123)).rates[0] == pytest.approx(0.123)
    t = compute_ctr_table(_one_entry(1000, 123), prior_weight=100, global_rate=0.1)
    assert t.rates[0] == pytest.approx(133 / 1100)
    assert round(t.rates[0], 4) == 0.1209
    assert compute_ctr_table(_one_entry(3411.1, -2.5)).rates[0] == 0.0


def test_zero_denominator_falls_back_to_prior():
    t = compute_ctr_table(_one_entry(-4.0, 1.0), prior_weight=0, global_rate=0.2)
    assert t.rates[0] == 0.2
    t = compute_ctr_table(_one_entry(0.5, 3.0))
    assert t.rates[0] == 1.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        compute_ctr_table(_one_entry(1, 1), prior_weight=-1)


def test_single_ctr_columns_match_empirical_means():
    rng = np.random.default_rng(0)
    cards = [3, 4, 5]
    data = random_dataset(rng, cards, 400)
    enc = FeatureIndexMap(cards)
    table = compute_ctr_table(build_report(data, enc))
    assert table.global_rate == pytest.approx(data.clicks.mean())
    out = enrich(data, table)
    for i in range(3):
        for m in range(cards[i]):
            sel = data.features[:, i] == m
            if sel.any():
                assert np.all(out.ctr[sel, i] == pytest.approx(data.clicks[sel].mean()))


@settings(max_examples=40, deadline=None)
@given(d=st.floats(0.5, 1e4), c1=st.floats(-10, 1e4), c2=st.floats(-10, 1e4),
       w=st.floats(0, 1e3), p0=st.floats(0, 1))
def test_rate_monotone_and_bounded(d, c1, c2, w, p0):
    lo, hi = sorted([c1, c2])
    a = compute_ctr_table(_one_entry(d, lo), prior_weight=w, global_rate=p0).rates[0]
    b = compute_ctr_table(_one_entry(d, hi), prior_weight=w, global_rate=p0).rates[0]
    assert 0 <= a <= b <= 1


def test_rate_tends_to_prior():
    t = compute_ctr_table(_one_entry(1000, 500), prior_weight=1e12, global_rate=0.1)
    assert t.rates[0] == pytest.approx(0.1, abs=1e-6)


def test_enrich_columns_and_fallback():
    rng = np.random.default_rng(1)
    cards = [3, 3, 3]
    enc = FeatureIndexMap(cards)
    train = GranularDataset(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]]), [0, 1, 1], [0, 0, 0])
    table = compute_ctr_table(build_report(train, enc))
    row = GranularDataset(np.array([[0, 1, 2]]), [0], [0])
    out = enrich(row, table, include_counts=True)
    assert out.ctr.shape == (1, 6) and out.counts.shape == (1, 6)
    # singles are all seen, every pair is unseen
    np.testing.assert_allclose(out.ctr[0, :3], [0.0, 1.0, 1.0])
    np.testing.assert_allclose(out.ctr[0, 3:], table.global_rate)
    np.testing.assert_array_equal(out.counts[0], [1, 1, 1, 0, 0, 0])
    assert len(out.column_names()) == 3 + 6 * 2 + 1


def test_nineteen_feature_column_count():
    enc = FeatureIndexMap([2] * 19)
    data = GranularDataset(np.zeros((2, 19), dtype=int), [0, 1], [0, 0])
    table = compute_ctr_table(build_report(data, enc))
    assert len(enrich(data, table).column_names()) == 19 + 190 + 1
    names = enrich(data, table, include_counts=True).column_names()
    assert len(names) == 19 + 380 + 1
    assert names[19] == "ctr_f0" and names[38] == "ctr_p_0_1" and names[208] == "ctr_p_17_18"


def test_enrich_empty_and_schema_mismatch(tmp_path):
    enc = FeatureIndexMap([2, 2])
    table = compute_ctr_table(build_report(GranularDataset([[0, 1]], [1], [0]), enc))
    empty = enrich(GranularDataset(np.zeros((0, 2), dtype=int), [], []), table)
    assert len(empty) == 0
    write_enriched_csv(empty, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == (
        "feat_0,feat_1,ctr_f0,ctr_f1,ctr_p_0_1,label\n")
    with pytest.raises(ValueError):
        enrich(GranularDataset(np.zeros((1, 3), dtype=int), [0], [0]), table)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), cut=st.integers(0, 30))
def test_enrich_is_row_wise(seed, cut):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, [3, 4], 30)
    table = compute_ctr_table(build_report(data, FeatureIndexMap([3, 4])), prior_weight=5)
    whole = enrich(data, table, include_counts=True)
    a = enrich(data.take(np.arange(cut)), table, include_counts=True)
    b = enrich(data.take(np.arange(cut, 30)), table, include_counts=True)
    np.testing.assert_array_equal(np.vstack([a.ctr, b.ctr]), whole.ctr)
    np.testing.assert_array_equal(np.vstack([a.counts, b.counts]), whole.counts)


def test_hashed_report_table():
    rng = np.random.default_rng(3)
    data = random_dataset(rng, [3, 4], 200)
    from agglearn.data import Schema
    enc = HashedEncoder(Schema.from_cardinalities([3, 4]), HashedEncoderConfig(1 << 20))
    table = compute_ctr_table(build_report(data, enc))
    out = enrich(data, table)
    assert out.ctr.shape == (200, 3) and np.all((out.ctr >= 0) & (out.ctr <= 1))


def test_sales_label_kind():
    data = GranularDataset(np.array([[0], [0], [1]]), [1, 1, 0], [1, 0, 0])
    table = compute_ctr_table(build_report(data, FeatureIndexMap([2])), label_kind="sale")
    np.testing.assert_allclose(table.rates, [0.5, 0.0])
    assert enrich(data, table).labels.tolist() == [1, 0, 0]


def test_learner_without_signal_predicts_base_rate():
    n = 400
    data = GranularDataset(np.zeros((n, 2), dtype=int), (np.arange(n) % 10 == 0).astype(int),
                           np.zeros(n))
    table = compute_ctr_table(build_report(data, FeatureIndexMap([1, 1])))
    model = train_enriched(enrich(data, table), [1, 1])
    assert predict_enriched(model, enrich(data, table)) == pytest.approx(np.full(n, 0.1), abs=2e-3)


def test_learner_rejects_single_class():
    data = GranularDataset(np.zeros((5, 1), dtype=int), np.zeros(5), np.zeros(5))
    table = compute_ctr_table(build_report(data, FeatureIndexMap([1])))
    with pytest.raises(ValueError):
        train_enriched(enrich(data, table), [1])


def test_enrichment_beats_plain_logistic_on_small_labeled_set():
    spec = SyntheticSpec([8, 12, 20, 30, 50], 100_000, seed=1)
    raw, _, schema = generate_synthetic(spec)
    test, _, _ = generate_synthetic(spec, num_rows=30_000, seed=99)
    enc = FeatureIndexMap(schema.cardinality)
    labeled = raw.take(np.arange(1000))
    plain = max(nce(predict(train_skyline(labeled.features, labeled.clicks, enc,
                                          TrainConfig(l2=l2, num_iterations=200)), test),
                    test.clicks).nce for l2 in (1, 4, 16))
    table = compute_ctr_table(build_report(raw, enc), prior_weight=10)
    model = train_enriched(enrich(labeled, table), schema.cardinality, EnrichConfig(l2=10))
    rich = nce(predict_enriched(model, enrich(test, table, labeled=False)), test.clicks).nce
    assert rich >= plain + 0.02


def test_enriched_model_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    data = random_dataset(rng, [3, 4, 2], 300)
    table = compute_ctr_table(build_report(data, FeatureIndexMap([3, 4, 2])), prior_weight=3)
    ed = enrich(data, table, include_counts=True)
    model = train_enriched(ed, [3, 4, 2], EnrichConfig(l2=2.0))
    write_enriched_model(model, tmp_path / "m")
    again = read_enriched_model(tmp_path / "m")
    np.testing.assert_array_equal(predict_enriched(again, ed), predict_enriched(model, ed))
    write_enriched_model(again, tmp_path / "m2")
    assert (tmp_path / "m" / "model.csv").read_bytes() == (tmp_path / "m2" / "model.csv").read_bytes()
    assert (tmp_path / "m" / "model.meta").read_bytes() == (tmp_path / "m2" / "model.meta").read_bytes()


def test_ctr_table_round_trip(tmp_path):
    from agglearn.data import Schema
    from agglearn.enrichment import read_ctr_table, write_ctr_table
    rng = np.random.default_rng(6)
    schema = Schema.from_cardinalities([3, 4])
    data = random_dataset(rng, [3, 4], 100)
    for enc in (FeatureIndexMap([3, 4]), HashedEncoder(schema, HashedEncoderConfig(1 << 10, 2))):
        table = compute_ctr_table(build_report(data, enc, sigma=2.0, seed=1), prior_weight=7)
        write_ctr_table(table, tmp_path / enc.kind)
        again = read_ctr_table(tmp_path / enc.kind, schema)
        np.testing.assert_array_equal(again.coords, table.coords)
        np.testing.assert_array_equal(again.rates, table.rates)
        assert (again.global_rate, again.prior_weight) == (table.global_rate, 7.0)
        np.testing.assert_array_equal(enrich(data, again).ctr, enrich(data, table).ctr)
