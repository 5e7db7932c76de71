import itertools
import math

import numpy as np
import pytest

from apicascade import (
    allocate_label_budgets,
    build_g_function,
    estimate_model,
    solve_fixed_base_label,
)
from apicascade.estimation import escalation_fraction

GRID_M = 2


@pytest.fixture(scope="module")
def model(tiny_instance):
    ds, cat = tiny_instance
    return estimate_model(ds, cat, grid_m=GRID_M)


def fraction_space_curve(model, k, label):
    """Gain curves in escalated-fraction space, built from raw grids."""
    fr = model.frac_grid[k, label]
    vals = model.psi_grid[k, :, label, :]
    xs = np.concatenate([[0.0], fr[1:]])
    ys = np.column_stack([vals[:, 1], vals[:, 1:]])
    xs_u, idx = np.unique(xs, return_index=True)
    return xs_u, ys[:, idx], float(vals[k, -1])


def dense_search(model, k, label, beta, catalog, grid=10001):
    """Independent dense scan over the escalated fraction and both sparse
    case families. Returns the best objective value found."""
    k_n = catalog.n_services
    costs = catalog.unit_costs()
    xs, ys, base = fraction_space_curve(model, k, label)
    extra = [beta / costs[i] for i in range(k_n) if i != k and costs[i] > 0]
    pts = np.unique(np.clip(np.concatenate([np.linspace(0, 1, grid), xs, extra]), 0, 1))
    gains = np.vstack([np.interp(pts, xs, ys[j]) for j in range(k_n)])
    gains -= gains[k]
    best = base
    for i in range(k_n):
        if i == k:
            continue
        coeff = np.minimum(beta / costs[i], pts) if costs[i] > 0 else pts
        best = max(best, float(np.max(base + coeff * gains[i])))
    for i, j in itertools.permutations(range(k_n), 2):
        if k in (i, j) or not costs[i] > costs[j]:
            continue
        lo = beta / costs[i]
        hi = min(beta / costs[j], 1.0) if costs[j] > 0 else 1.0
        mask = (pts >= lo) & (pts <= hi)
        if not mask.any():
            continue
        v = base + ((beta - pts * costs[j]) * gains[i] + (pts * costs[i] - beta) * gains[j]) / (
            costs[i] - costs[j]
        )
        best = max(best, float(np.max(v[mask])))
    return best


class TestFixedBaseLabel:
    def test_zero_budget_never_escalates(self, model, tiny_catalog):
        for k in range(3):
            for l in range(2):
                sol = solve_fixed_base_label(model, k, l, 0.0, tiny_catalog)
                assert sol.fraction == 0.0 and sol.level == 0.0
                expected = model.psi_grid[k, k, l, -1] if model.counts[k, l] else 0.0
                assert sol.h_value == pytest.approx(expected)
                assert sol.pi[k] == 1.0

    def test_no_profitable_addon_keeps_base(self, tiny_catalog):
        # every add-on strictly worse at every knot: optimum is never-escalate
        import dataclasses

        from apicascade.estimation import EstimatedModel

        m = 2
        psi_grid = np.zeros((2, 2, 2, m + 1))
        psi_grid[0, 0, 0] = [0.0, 0.8, 0.9]   # base itself
        psi_grid[0, 1, 0] = [0.0, 0.3, 0.2]   # add-on, strictly worse
        populated = np.zeros((2, 2, m + 1), dtype=bool)
        populated[0, 0] = [False, True, True]
        model = EstimatedModel(
            a_hat=np.array([[1.0, 0.0], [1.0, 0.0]]),
            quantile_grid=np.zeros((2, 2, m + 1)),
            psi_grid=psi_grid,
            frac_grid=np.array([[[0.0, 0.5, 1.0], [0.0, 0.0, 0.0]]] * 2),
            populated=populated,
            counts=np.array([[4, 0], [4, 0]]),
            escalated_counts=np.zeros((2, 2, m + 1), dtype=np.int64),
            sorted_scores=((np.array([0.1, 0.2, 0.3, 0.4]), np.empty(0)),) * 2,
            grid_m=m,
            labels=("x", "y"),
            catalog_fingerprint="",
        )
        from tests.test_catalog import make_catalog

        cat = make_catalog(costs=(5000, 20000), labels=("x", "y"))
        sol = solve_fixed_base_label(model, 0, 0, 10.0, cat)
        assert sol.fraction == 0.0
        assert sol.h_value == pytest.approx(0.9)

    @pytest.mark.parametrize("k", [0, 1, 2])
    @pytest.mark.parametrize("label", [0, 1])
    @pytest.mark.parametrize("beta_scale", [0.7, 0.2, 1.5])
    def test_matches_dense_grid_search(self, model, tiny_catalog, k, label, beta_scale):
        beta = beta_scale * float(np.min(tiny_catalog.unit_costs()))
        sol = solve_fixed_base_label(model, k, label, beta, tiny_catalog)
        dense = dense_search(model, k, label, beta, tiny_catalog)
        assert sol.h_value >= dense - 1e-12
        assert sol.h_value <= dense + 1e-5  # dense grid brackets interior vertices

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_solution_is_self_consistent(self, model, tiny_catalog, k):
        costs = tiny_catalog.unit_costs()
        for label in range(2):
            for beta in (0.0, 0.3, 0.9, 2.4):
                sol = solve_fixed_base_label(model, k, label, beta, tiny_catalog)
                # simplex and sparsity
                assert sol.pi.min() >= -1e-12
                assert sol.pi.sum() == pytest.approx(1.0, abs=1e-12)
                assert np.sum(sol.pi > 1e-12) <= 2
                # budget constraint on the off-base mass
                off = sol.pi.copy()
                off[k] = 0.0
                assert sol.fraction * float(off @ costs) <= beta + 1e-9
                # support matches one of the sparse case families
                support = set(np.flatnonzero(sol.pi > 1e-12))
                assert (
                    len(support) == 1
                    or k in support
                    or len(support - {k}) == 2
                )
                # the reported value is reproduced by the model interpolators
                if sol.fraction > 0:
                    from apicascade.estimation import psi

                    mix = sum(
                        sol.pi[j] * (psi(model, k, j, label, sol.level) - psi(model, k, k, label, sol.level))
                        for j in range(3)
                    )
                    recomputed = psi(model, k, k, label, 1.0) + sol.fraction * mix
                    assert recomputed == pytest.approx(sol.h_value, abs=1e-9)
                    assert escalation_fraction(model, k, label, sol.level) == pytest.approx(
                        sol.fraction, abs=1e-12
                    )

    def test_h_nondecreasing_in_budget(self, model, tiny_catalog):
        for k in range(3):
            for label in range(2):
                values = [
                    solve_fixed_base_label(model, k, label, beta, tiny_catalog).h_value
                    for beta in np.linspace(0, 4.0, 17)
                ]
                assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_h_at_least_base_accuracy(self, model, tiny_catalog):
        for k in range(3):
            for label in range(2):
                base = model.psi_grid[k, k, label, -1] if model.counts[k, label] else 0.0
                for beta in (0.0, 0.5, 2.0):
                    sol = solve_fixed_base_label(model, k, label, beta, tiny_catalog)
                    assert sol.h_value >= base - 1e-12


class TestAllocation:
    def enumerate_allocations(self, model, k, b_prime, grid_m, catalog):
        costs = catalog.unit_costs()
        span = max(b_prime - costs[k], 0.0)
        table = [
            [
                solve_fixed_base_label(model, k, l, t * span / grid_m, catalog).h_value
                for t in range(grid_m + 1)
            ]
            for l in range(model.n_labels)
        ]
        best_v, best_t = -math.inf, None
        combos = [
            (t, grid_m - t) for t in range(grid_m + 1)
        ] if model.n_labels == 2 else None
        for combo in combos:
            v = sum(model.a_hat[k, l] * table[l][combo[l]] for l in range(model.n_labels))
            if v > best_v or (v == best_v and combo > best_t):
                best_v, best_t = v, combo
        return best_v, best_t

    def test_single_label_takes_everything(self, tiny_instance):
        from apicascade.estimation import merge_labels

        ds, cat = tiny_instance
        merged = merge_labels(ds, cat, GRID_M)
        alloc = allocate_label_budgets(merged, 0, 3.6, GRID_M, cat)
        assert alloc.t == (GRID_M,)

    @pytest.mark.parametrize("k", [0, 1, 2])
    @pytest.mark.parametrize("b_prime", [0.5, 2.0, 3.6, 5.4, 7.2])
    def test_dp_equals_enumeration(self, model, tiny_catalog, k, b_prime):
        if b_prime < tiny_catalog.unit_costs()[k]:
            pytest.skip("branch cannot pay its base cost")
        alloc = allocate_label_budgets(model, k, b_prime, GRID_M, tiny_catalog)
        best_v, best_t = self.enumerate_allocations(model, k, b_prime, GRID_M, tiny_catalog)
        assert alloc.g_value == pytest.approx(best_v, abs=0)
        assert alloc.t == best_t

    def test_constant_value_tie_break(self, model, tiny_catalog):
        # at zero after-base budget every allocation ties; canonical is (M, 0)
        k = 2
        c_k = float(tiny_catalog.unit_costs()[k])
        alloc = allocate_label_budgets(model, k, c_k, GRID_M, tiny_catalog)
        assert alloc.t == (GRID_M, 0)


class TestGFunction:
    def test_knot_values_nondecreasing(self, model, tiny_catalog):
        for i in range(3):
            g = build_g_function(model, i, GRID_M, tiny_catalog)
            vals = g.values[g.evaluated]
            assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))
            assert np.all(g.values >= 0) and np.all(g.values <= 1)

    def test_zero_at_base_cost_when_off_grid(self, model, tiny_catalog):
        # cheap service cost 0.5 is not one of the knots {0, 3.6, 7.2}
        g = build_g_function(model, 0, GRID_M, tiny_catalog)
        assert g.value(0.5) == 0.0
        assert g.value(0.49) == 0.0
        assert g.value(0.51) > 0.0

    def test_midpoint_linearity(self, model, tiny_catalog):
        g = build_g_function(model, 0, GRID_M, tiny_catalog)
        mid = (3.6 + 7.2) / 2
        assert g.value(mid) == pytest.approx((g.value(3.6) + g.value(7.2)) / 2, rel=1e-12)

    def test_clamped_beyond_span(self, model, tiny_catalog):
        g = build_g_function(model, 1, GRID_M, tiny_catalog)
        assert g.value(100.0) == pytest.approx(g.values[-1])

    def test_knot_values_match_per_knot_allocation(self, model, tiny_catalog):
        for i in range(3):
            g = build_g_function(model, i, GRID_M, tiny_catalog)
            for m in range(GRID_M + 1):
                if not g.evaluated[m]:
                    continue
                alloc = allocate_label_budgets(model, i, float(g.theta[m]), GRID_M, tiny_catalog)
                assert g.values[m] == alloc.g_value

    def test_monotone_against_brute_force_at_knots(self, model, tiny_catalog):
        enum = TestAllocation()
        g = build_g_function(model, 2, GRID_M, tiny_catalog)
        for m in range(GRID_M + 1):
            if g.evaluated[m]:
                best_v, _ = enum.enumerate_allocations(model, 2, float(g.theta[m]), GRID_M, tiny_catalog)
                assert g.values[m] == pytest.approx(best_v, abs=0)
