from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apicascade import (
    DataFormatError,
    FingerprintMismatchError,
    FormatVersionError,
    Service,
    ServiceCatalog,
    Strategy,
    StructureError,
    deserialize_strategy,
    serialize_strategy,
    validate_strategy,
)
from apicascade.catalog import default_strategy_arrays


def make_catalog(costs=(5000, 20000, 36000), labels=("a", "b")):
    services = tuple(Service(f"svc{i}", Decimal(str(c))) for i, c in enumerate(costs))
    return ServiceCatalog(services, labels)


def make_strategy(catalog, base=(1.0, 0.0, 0.0)):
    p, th, lv, addon = default_strategy_arrays(catalog.n_services, catalog.n_labels)
    p[:] = base
    return Strategy(p, th, lv, addon, {"catalog_fingerprint": catalog.fingerprint()})


class TestCatalog:
    def test_unit_cost_is_exact_decimal(self):
        svc = Service("x", Decimal("15"))
        assert svc.unit_cost == Decimal("0.0015")

    def test_duplicate_names_rejected(self):
        with pytest.raises(StructureError):
            ServiceCatalog((Service("x", Decimal(1)), Service("x", Decimal(2))), ("a", "b"))

    def test_at_most_one_free_service(self):
        with pytest.raises(StructureError):
            ServiceCatalog(
                (Service("x", Decimal(0)), Service("y", Decimal(0))), ("a", "b")
            )
        # one free service is fine
        ServiceCatalog((Service("x", Decimal(0)), Service("y", Decimal(2))), ("a", "b"))

    def test_needs_two_labels(self):
        with pytest.raises(StructureError):
            ServiceCatalog((Service("x", Decimal(1)),), ("a",))

    def test_fingerprint_sensitive_to_order_and_price(self):
        c1 = make_catalog()
        c2 = make_catalog(costs=(20000, 5000, 36000))
        c3 = make_catalog(costs=(5000, 20000, 36001))
        assert c1.fingerprint() != c2.fingerprint()
        assert c1.fingerprint() != c3.fingerprint()
        assert c1.fingerprint() == make_catalog().fingerprint()


class TestValidate:
    def test_single_deterministic_base_is_valid(self):
        catalog = make_catalog()
        strategy = make_strategy(catalog, base=(1.0, 0.0, 0.0))
        assert validate_strategy(strategy, catalog) == []

    def test_three_nonzero_bases_violates_sparsity(self):
        catalog = make_catalog()
        strategy = make_strategy(catalog, base=(0.5, 0.3, 0.2))
        violations = validate_strategy(strategy, catalog)
        assert any("3 nonzeros" in v for v in violations)

    def test_bad_addon_slice_sum_is_reported_with_indices(self):
        catalog = make_catalog()
        p, th, lv, addon = default_strategy_arrays(3, 2)
        p[:] = (0.6, 0.4, 0.0)
        addon[0, 1, :] = (0.0, 0.9, 0.0)
        strategy = Strategy(p, th, lv, addon)
        violations = validate_strategy(strategy, catalog)
        assert any("(0,1)" in v and "sums to" in v for v in violations)

    def test_dimension_mismatch_is_structural(self):
        catalog = make_catalog()
        small = make_catalog(costs=(5000, 20000), labels=("a", "b"))
        strategy = make_strategy(small, base=(1.0, 0.0))
        with pytest.raises(StructureError):
            validate_strategy(strategy, catalog)

    def test_level_zero_requires_zero_threshold(self):
        catalog = make_catalog()
        p, th, lv, addon = default_strategy_arrays(3, 2)
        p[0] = 1.0
        th[0, 0] = 0.5  # threshold without a level
        strategy = Strategy(p, th, lv, addon)
        violations = validate_strategy(strategy, catalog)
        assert any("level 0 but a nonzero threshold" in v for v in violations)


class TestSerialization:
    def test_round_trip_identity(self):
        catalog = make_catalog()
        p, th, lv, addon = default_strategy_arrays(3, 2)
        p[:] = (0.25, 0.75, 0.0)
        th[0, 0], lv[0, 0] = 0.625, 0.5
        th[1, 1], lv[1, 1] = 0.875, 0.75
        addon[0, 0, :] = (0.0, 0.3, 0.7)
        addon[1, 1, :] = (0.4, 0.6, 0.0)
        strategy = Strategy(
            p, th, lv, addon,
            {"catalog_fingerprint": catalog.fingerprint(), "budget": 1.7, "grid_m": 4},
        )
        back = deserialize_strategy(serialize_strategy(strategy), catalog)
        assert np.array_equal(back.base_mixture, strategy.base_mixture)
        assert np.array_equal(back.thresholds, strategy.thresholds)
        assert np.array_equal(back.threshold_levels, strategy.threshold_levels)
        assert np.array_equal(back.addon, strategy.addon)
        assert back.meta["budget"] == 1.7

    @given(
        p0=st.floats(0.0, 1.0),
        th=st.floats(0.0, 1.0),
        lv=st.floats(0.01, 1.0),
        w=st.floats(0.0, 1.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_round_trip_is_bit_exact_on_floats(self, p0, th, lv, w):
        catalog = make_catalog()
        p, thm, lvm, addon = default_strategy_arrays(3, 2)
        p[0], p[2] = p0, 1.0 - p0
        thm[0, 0], lvm[0, 0] = th, lv
        addon[0, 0, :] = (1.0 - w, 0.0, w)
        strategy = Strategy(p, thm, lvm, addon, {"catalog_fingerprint": catalog.fingerprint()})
        back = deserialize_strategy(serialize_strategy(strategy), catalog)
        assert np.array_equal(back.base_mixture, strategy.base_mixture)
        assert np.array_equal(back.thresholds, strategy.thresholds)
        assert np.array_equal(back.threshold_levels, strategy.threshold_levels)
        assert np.array_equal(back.addon, strategy.addon)

    def test_missing_addon_field_is_malformed(self):
        catalog = make_catalog()
        text = serialize_strategy(make_strategy(catalog))
        import json

        doc = json.loads(text)
        del doc["addon"]
        with pytest.raises(DataFormatError):
            deserialize_strategy(json.dumps(doc), catalog)

    def test_incomplete_addon_slice_is_malformed(self):
        catalog = make_catalog()
        p, th, lv, addon = default_strategy_arrays(3, 2)
        p[0] = 1.0
        th[0, 0], lv[0, 0] = 0.5, 0.5
        addon[0, 0, :] = (0.0, 0.5, 0.5)
        strategy = Strategy(p, th, lv, addon, {"catalog_fingerprint": catalog.fingerprint()})
        import json

        doc = json.loads(serialize_strategy(strategy))
        doc["addon"] = [t for t in doc["addon"] if not (t[0] == 0 and t[1] == 0 and t[2] == 2)]
        with pytest.raises(DataFormatError):
            deserialize_strategy(json.dumps(doc), catalog)

    def test_version_mismatch(self):
        catalog = make_catalog()
        text = serialize_strategy(make_strategy(catalog)).replace('"version": "1"', '"version": "99"')
        with pytest.raises(FormatVersionError):
            deserialize_strategy(text, catalog)

    def test_fingerprint_mismatch(self):
        catalog = make_catalog()
        other = make_catalog(costs=(5000, 20000, 36000, 50000))
        text = serialize_strategy(make_strategy(catalog))
        with pytest.raises(FingerprintMismatchError):
            deserialize_strategy(text, other)
