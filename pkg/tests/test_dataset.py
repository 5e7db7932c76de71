import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apicascade import (
    DataFormatError,
    Service,
    ServiceCatalog,
    ValidationError,
    empirical_quantile,
    load_dataset,
    split,
)
from apicascade.dataset import NEVER_ESCALATE_SENTINEL, edit_distance, nearest_label


def write_csv(tmp_path, rows, header="sample_id,true_label,pred_svc0,score_svc0,pred_svc1,score_svc1"):
    path = tmp_path / "data.csv"
    path.write_text("\n".join([header] + rows) + "\n")
    return str(path)


def two_service_catalog(score_map=None):
    return ServiceCatalog(
        (Service("svc0", Decimal(5000)), Service("svc1", Decimal(20000))),
        ("cat", "dog"),
        score_map,
    )


class TestQuantile:
    def test_nearest_rank_examples(self):
        assert empirical_quantile([0.1, 0.2, 0.3, 0.4], 0.5) == 0.2
        assert empirical_quantile([0.1, 0.2, 0.3, 0.4], 1.0) == 0.4
        assert empirical_quantile([0.7], 0.3) == 0.7

    def test_level_zero_is_sentinel(self):
        assert empirical_quantile([0.5, 0.9], 0.0) == NEVER_ESCALATE_SENTINEL

    def test_empty_sequence_raises(self):
        with pytest.raises(ValidationError):
            empirical_quantile([], 0.5)

    @given(
        values=st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=30),
        level=st.floats(0.01, 1.0),
        level2=st.floats(0.01, 1.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_monotone_in_level_and_permutation_invariant(self, values, level, level2):
        lo, hi = sorted([level, level2])
        assert empirical_quantile(values, lo) <= empirical_quantile(values, hi)
        shuffled = list(np.random.default_rng(0).permutation(values))
        assert empirical_quantile(values, level) == empirical_quantile(shuffled, level)

    @given(n=st.integers(1, 25), m=st.integers(1, 25))
    @settings(max_examples=60, deadline=None)
    def test_exact_rank_count_on_distinct_values(self, n, m):
        if m > n:
            m = n
        values = [i / n for i in range(1, n + 1)]
        q = empirical_quantile(values, m / n)
        assert sum(v <= q for v in values) == m


class TestLoad:
    def test_basic_load(self, tmp_path):
        catalog = two_service_catalog()
        path = write_csv(tmp_path, [
            "r1,cat,cat,0.9,dog,0.8",
            "r2,dog,dog,0.7,dog,0.6",
            "r3,cat,dog,0.2,cat,0.9",
            "r4,dog,cat,0.4,dog,0.5",
        ])
        ds = load_dataset(path, catalog)
        assert len(ds) == 4
        assert ds.samples[2].predicted == ("dog", "cat")
        assert ds.samples[2].scores == (0.2, 0.9)

    def test_score_out_of_range_names_row(self, tmp_path):
        catalog = two_service_catalog()
        path = write_csv(tmp_path, ["r1,cat,cat,0.9,dog,0.8", "r2,dog,dog,1.3,dog,0.6"])
        with pytest.raises(DataFormatError, match=":3"):
            load_dataset(path, catalog)

    def test_unknown_true_label_names_row(self, tmp_path):
        catalog = two_service_catalog()
        path = write_csv(tmp_path, ["r1,bird,cat,0.9,dog,0.8"])
        with pytest.raises(DataFormatError, match=":2"):
            load_dataset(path, catalog)

    def test_missing_column(self, tmp_path):
        catalog = two_service_catalog()
        path = write_csv(tmp_path, ["r1,cat,cat,0.9"],
                         header="sample_id,true_label,pred_svc0,score_svc0")
        with pytest.raises(DataFormatError, match="missing columns"):
            load_dataset(path, catalog)

    def test_categorical_score_map(self, tmp_path):
        catalog = two_service_catalog(
            score_map={"very unlikely": 0.2, "unlikely": 0.4, "possible": 0.6,
                       "likely": 0.8, "very likely": 1.0}
        )
        path = write_csv(tmp_path, ['r1,cat,cat,very likely,dog,0.8'])
        ds = load_dataset(path, catalog)
        assert ds.samples[0].scores[0] == 1.0

    def test_off_vocabulary_prediction_remapped_by_edit_distance(self, tmp_path):
        catalog = two_service_catalog()
        path = write_csv(tmp_path, ["r1,cat,cut,0.9,dog,0.8"])
        ds = load_dataset(path, catalog)
        assert ds.samples[0].predicted[0] == "cat"

    def test_strict_mode_rejects_off_vocabulary(self, tmp_path):
        catalog = two_service_catalog()
        path = write_csv(tmp_path, ["r1,cat,cut,0.9,dog,0.8"])
        with pytest.raises(DataFormatError, match="cut"):
            load_dataset(path, catalog, strict_labels=True)

    def test_duplicate_ids_rejected(self, tmp_path):
        catalog = two_service_catalog()
        path = write_csv(tmp_path, ["r1,cat,cat,0.9,dog,0.8", "r1,dog,dog,0.7,dog,0.6"])
        with pytest.raises(ValidationError):
            load_dataset(path, catalog)


class TestEditDistance:
    def test_known_distances(self):
        assert edit_distance("for", "four") == 1
        assert edit_distance("kitten", "sitting") == 3
        assert edit_distance("same", "same") == 0

    def test_nearest_label_prefers_earlier_on_tie(self):
        assert nearest_label("ax", ("ab", "ay")) == "ab"


class TestSplit:
    def test_deterministic_membership(self, tiny_dataset):
        a1, b1 = split(tiny_dataset, 0.5, seed=7)
        a2, b2 = split(tiny_dataset, 0.5, seed=7)
        assert a1.sample_ids() == a2.sample_ids()
        assert b1.sample_ids() == b2.sample_ids()
        assert len(a1) == 100 and len(b1) == 100
        assert set(a1.sample_ids()).isdisjoint(b1.sample_ids())

    def test_ceiling_rule(self, tiny_dataset):
        sub = type(tiny_dataset)(tiny_dataset.samples[:3], tiny_dataset.catalog_fingerprint)
        a, b = split(sub, 0.5, seed=0)
        assert (len(a), len(b)) == (2, 1)

    def test_single_sample_cannot_split(self, tiny_dataset):
        sub = type(tiny_dataset)(tiny_dataset.samples[:1], tiny_dataset.catalog_fingerprint)
        with pytest.raises(ValidationError):
            split(sub, 0.5, seed=0)

    @given(seed=st.integers(0, 1000), frac=st.floats(0.05, 0.95))
    @settings(max_examples=25, deadline=None)
    def test_partition_sizes(self, tiny_dataset, seed, frac):
        a, b = split(tiny_dataset, frac, seed)
        assert len(a) == math.ceil(frac * len(tiny_dataset))
        assert len(a) + len(b) == len(tiny_dataset)
