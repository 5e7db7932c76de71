"""Mixture search over base services and the full training pipeline.

The outer problem picks at most two base services, mixture weights, and a
budget split. On each pair of linear pieces of the per-base value
functions, p * g(b'/p) is linear in (p, b1, b2), so the piece-pair cell
reduces to a tiny linear program solved exactly by enumerating vertices
of its polytope. Training chains estimation, per-base value functions,
the mixture search, and a final re-solve of the winning branches into a
concrete strategy.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .catalog import ServiceCatalog, Strategy, default_strategy_arrays
from .dataset import AnnotatedDataset, check_fingerprint
from .errors import InfeasibleBudgetError, ValidationError
from .estimation import (
    EstimatedModel,
    escalation_fraction,
    estimate_model,
    merge_labels,
    psi,
    threshold_at_level,
)
from .subproblem import Allocation, GFunction, allocate_label_budgets, build_g_function

_P_ATOL = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    """Training knobs: budget, grid resolution, seed, restriction flags."""

    budget: float
    grid_m: int = 10
    seed: int = 0
    fixed_base: Optional[int] = None
    uniform_threshold: bool = False
    threads: int = 1

    def __post_init__(self) -> None:
        if self.grid_m < 1:
            raise ValidationError(f"grid resolution must be >= 1, got {self.grid_m}")
        if self.budget < 0:
            raise ValidationError(f"budget must be >= 0, got {self.budget}")


@dataclass(frozen=True)
class MasterSolution:
    """Winning (bases, weights, budget split); single-base when p2 == 0."""

    i1: int
    i2: int
    p1: float
    p2: float
    b1: float
    b2: float
    objective: float


def _vertex_candidates(
    piece1: tuple[float, float, float, float],
    piece2: tuple[float, float, float, float],
    budget: float,
) -> list[tuple[float, float, float, float]]:
    """Exact maximum of one piece-pair cell by vertex enumeration.

    Variables x = (p, b1, b2) with p2 = 1 - p substituted. Constraints
    (all written a.x <= rhs): simplex bounds on p, nonnegativity of the
    budget shares, the total budget, and the piece ranges lo*p <= b <= hi*p
    for each branch (upper bounds dropped on the unbounded tail piece).
    Returns feasible vertices as (objective, p, b1, b2).
    """
    lo1, hi1, s1, t1 = piece1
    lo2, hi2, s2, t2 = piece2
    rows: list[tuple[np.ndarray, float]] = [
        (np.array([-1.0, 0.0, 0.0]), 0.0),
        (np.array([1.0, 0.0, 0.0]), 1.0),
        (np.array([0.0, -1.0, 0.0]), 0.0),
        (np.array([0.0, 0.0, -1.0]), 0.0),
        (np.array([0.0, 1.0, 1.0]), budget),
        (np.array([lo1, -1.0, 0.0]), 0.0),
        (np.array([-lo2, 0.0, -1.0]), -lo2),
    ]
    if math.isfinite(hi1):
        rows.append((np.array([-hi1, 1.0, 0.0]), 0.0))
    if math.isfinite(hi2):
        rows.append((np.array([hi2, 0.0, 1.0]), hi2))

    a_mat = np.array([r[0] for r in rows])
    rhs = np.array([r[1] for r in rows])
    tol = 1e-9 * max(1.0, budget, abs(lo1), abs(lo2))
    out: list[tuple[float, float, float, float]] = []
    for combo in itertools.combinations(range(len(rows)), 3):
        sub = a_mat[list(combo)]
        try:
            x = np.linalg.solve(sub, rhs[list(combo)])
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(x)):
            continue
        if np.any(a_mat @ x > rhs + tol):
            continue
        p, b1, b2 = float(x[0]), float(x[1]), float(x[2])
        value = t1 * p + s1 * b1 + t2 * (1.0 - p) + s2 * b2
        out.append((value, p, b1, b2))
    return out


def solve_master(
    g_functions: Sequence[GFunction], budget: float, catalog: ServiceCatalog
) -> MasterSolution:
    """Global maximum over single bases and ordered base pairs.

    Single-base candidates use the full budget (values are nondecreasing).
    Pair candidates run the per-cell vertex enumeration. Tie order: higher
    objective, then smaller i1, smaller i2, larger p1, larger spend.
    """
    costs = catalog.unit_costs()
    indices = [g.base_index for g in g_functions]
    if budget < min(costs[i] for i in indices) - 1e-12:
        raise InfeasibleBudgetError(
            f"budget {budget} is below the cheapest available base cost"
        )
    by_index = {g.base_index: g for g in g_functions}

    # (negated objective, i1, i2, -p1, -(b1+b2), -b1) for deterministic ties
    best_key: Optional[tuple] = None
    best: Optional[MasterSolution] = None

    def consider(i1: int, i2: int, p1: float, b1: float, b2: float, value: float) -> None:
        nonlocal best_key, best
        key = (-value, i1, i2, -p1, -(b1 + b2), -b1)
        if best_key is None or key < best_key:
            best_key = key
            best = MasterSolution(i1, i2, p1, 1.0 - p1, b1, b2, value)

    for i in indices:
        consider(i, i, 1.0, budget, 0.0, by_index[i].value(budget))

    for i1, i2 in itertools.combinations(sorted(indices), 2):
        for piece1 in by_index[i1].pieces:
            for piece2 in by_index[i2].pieces:
                for value, p, b1, b2 in _vertex_candidates(piece1, piece2, budget):
                    consider(i1, i2, p, b1, b2, value)

    assert best is not None
    if best.p2 <= _P_ATOL:
        best = MasterSolution(best.i1, best.i1, 1.0, 0.0, best.b1, 0.0, best.objective)
    elif best.p1 <= _P_ATOL:
        best = MasterSolution(best.i2, best.i2, 1.0, 0.0, best.b2, 0.0, best.objective)
    return best


def predict_performance(
    strategy: Strategy, model: EstimatedModel, catalog: ServiceCatalog
) -> tuple[float, float]:
    """Model-implied (expected accuracy, expected cost) of a strategy.

    Escalation probabilities come from the realized escalation fractions at
    each stored level, so on the training corpus this matches the exact
    replay expectation whenever every level sits on a grid knot.
    """
    costs = catalog.unit_costs()
    acc = 0.0
    cost = 0.0
    for i in strategy.active_bases():
        p_i = float(strategy.base_mixture[i])
        acc_i = 0.0
        cost_i = float(costs[i])
        for l in range(model.n_labels):
            weight = float(model.a_hat[i, l])
            if weight == 0.0:
                continue
            level = float(strategy.threshold_levels[i, l])
            own_full = psi(model, i, i, l, 1.0)
            if level <= 0.0:
                acc_i += weight * own_full
                continue
            d = escalation_fraction(model, i, l, level)
            own_at = psi(model, i, i, l, level)
            mix_acc = 0.0
            mix_cost = 0.0
            for j in np.flatnonzero(strategy.addon[i, l] > 0.0):
                w = float(strategy.addon[i, l, j])
                mix_acc += w * psi(model, i, int(j), l, level)
                if int(j) != i:
                    mix_cost += w * float(costs[j])
            acc_i += weight * (own_full + d * (mix_acc - own_at))
            cost_i += weight * d * mix_cost
        acc += p_i * acc_i
        cost += p_i * cost_i
    return acc, cost


def _branch_rows(
    model: EstimatedModel,
    base: int,
    b_prime: float,
    config: SolverConfig,
    catalog: ServiceCatalog,
) -> tuple[Allocation, np.ndarray, np.ndarray, np.ndarray]:
    """Re-solve one winning branch into threshold/level/add-on rows."""
    span = 2.0 * float(np.max(catalog.unit_costs()))
    alloc = allocate_label_budgets(model, base, min(b_prime, span), config.grid_m, catalog)
    l_n = model.n_labels
    q_row = np.zeros(l_n)
    lv_row = np.zeros(l_n)
    pi_rows = np.zeros((l_n, catalog.n_services))
    for l, sol in enumerate(alloc.solutions):
        if sol.fraction <= 0.0:
            pi_rows[l, base] = 1.0
            continue
        lv_row[l] = sol.level
        q_row[l] = threshold_at_level(model, base, l, sol.level)
        pi_rows[l] = sol.pi
    return alloc, q_row, lv_row, pi_rows


def assemble_strategy(
    master: MasterSolution,
    model: EstimatedModel,
    catalog: ServiceCatalog,
    config: SolverConfig,
) -> Strategy:
    """Turn a mixture solution into a concrete strategy.

    Each branch with positive weight is re-solved at its per-branch budget
    (capped at the value-function span, beyond which values are clamped).
    A branch that cannot pay its own base cost contributes nothing and is
    dropped; if no branch survives, the cheapest service as a
    never-escalate base is the canonical fallback.
    """
    costs = catalog.unit_costs()
    branches = []
    for base, p, share in ((master.i1, master.p1, master.b1), (master.i2, master.p2, master.b2)):
        if p <= _P_ATOL:
            continue
        b_prime = share / p
        if b_prime < costs[base] - 1e-9 * max(1.0, b_prime):
            continue
        branches.append((base, p, b_prime))
    if not branches:
        cheapest = int(np.argmin(costs))
        branches = [(cheapest, 1.0, float(costs[cheapest]))]
    total_p = sum(p for _, p, _ in branches)
    branches = [(base, p / total_p, b_prime) for base, p, b_prime in branches]

    k_n, l_n = catalog.n_services, catalog.n_labels
    base_mix, thresholds, levels, addon = default_strategy_arrays(k_n, l_n)
    meta_branches = []
    for base, p, b_prime in branches:
        alloc, q_row, lv_row, pi_rows = _branch_rows(model, base, b_prime, config, catalog)
        base_mix[base] += p
        if config.uniform_threshold:
            # The merged model has a single conditioning class; its rule is
            # broadcast to every catalog label.
            thresholds[base, :] = q_row[0]
            levels[base, :] = lv_row[0]
            addon[base, :, :] = pi_rows[0]
        else:
            thresholds[base, :] = q_row
            levels[base, :] = lv_row
            addon[base, :, :] = pi_rows
        meta_branches.append(
            {
                "service": catalog.services[base].name,
                "base_index": base,
                "weight": p,
                "branch_budget": b_prime,
                "allocation": list(alloc.t),
            }
        )

    meta = {
        "budget": float(config.budget),
        "grid_m": config.grid_m,
        "seed": config.seed,
        "catalog_fingerprint": catalog.fingerprint(),
        "fixed_base": config.fixed_base,
        "uniform_threshold": config.uniform_threshold,
        "branches": meta_branches,
        "master_objective": master.objective,
    }
    strategy = Strategy(base_mix, thresholds, levels, addon, meta)
    acc, cost = predict_performance(strategy, model, catalog)
    meta["predicted_accuracy"] = acc
    meta["predicted_cost"] = cost
    return Strategy(base_mix, thresholds, levels, addon, meta)


def train(
    dataset: AnnotatedDataset, catalog: ServiceCatalog, config: SolverConfig
) -> Strategy:
    """Full training pipeline for one budget."""
    check_fingerprint(dataset, catalog)
    costs = catalog.unit_costs()
    if config.budget < float(np.min(costs)) - 1e-12:
        raise InfeasibleBudgetError(
            f"budget {config.budget} cannot pay for the cheapest service"
        )
    if config.fixed_base is not None and not 0 <= config.fixed_base < catalog.n_services:
        raise ValidationError(f"fixed base index {config.fixed_base} out of range")

    if config.uniform_threshold:
        model = merge_labels(dataset, catalog, config.grid_m)
    else:
        model = estimate_model(dataset, catalog, config.grid_m)

    bases = [config.fixed_base] if config.fixed_base is not None else list(range(catalog.n_services))
    if config.threads > 1 and len(bases) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            g_functions = list(
                pool.map(lambda i: build_g_function(model, i, config.grid_m, catalog), bases)
            )
    else:
        g_functions = [build_g_function(model, i, config.grid_m, catalog) for i in bases]

    master = solve_master(g_functions, config.budget, catalog)
    return assemble_strategy(master, model, catalog, config)
