"""Independent brute-force search and synthetic corpus generation.

The brute-force optimizer exhausts the same discretized strategy family
the trainer searches: base pairs, mixture weights and budget splits on a
candidate mesh, per-label unit allocations by full enumeration, and
per-label escalation rules scanned densely (with exact per-interval
parabola refinement, since each interval of the scan lies inside one
quadratic piece of the objective). It shares only the estimated model and
replay semantics with the trainer; no solver logic is reused. Guard rails
keep it on tiny instances.

The corpus generator draws labeled samples with controllable per-service
per-label accuracy and score informativeness, deterministically per seed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterator, Optional, Sequence

import numpy as np

from .catalog import Service, ServiceCatalog, Strategy, default_strategy_arrays
from .dataset import AnnotatedDataset, AnnotatedSample
from .errors import InfeasibleBudgetError, ValidationError
from .estimation import (
    EstimatedModel,
    estimate_model,
    level_at_fraction,
    threshold_at_level,
)

_GUARD_RAILS = {"n_services": 4, "n_labels": 3, "grid_m": 4, "p_grid_steps": 20}


@dataclass(frozen=True)
class OracleResult:
    strategy: Strategy
    accuracy: float
    enumeration_size: int


@dataclass(frozen=True)
class _LabelBest:
    value: float
    fraction: float
    pi: np.ndarray
    level: float


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All nonnegative integer vectors of the given length summing to total."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


class _Search:
    """Stateful search over one instance, with per-(base, label, budget) caches."""

    def __init__(self, model: EstimatedModel, catalog: ServiceCatalog, grid_m: int):
        self.model = model
        self.catalog = catalog
        self.grid_m = grid_m
        self.costs = catalog.unit_costs()
        self.span = 2.0 * float(np.max(self.costs))
        self.k_n = catalog.n_services
        self._curves: dict[tuple[int, int], Optional[tuple[np.ndarray, np.ndarray, float]]] = {}
        self._label_cache: dict[tuple[int, int, float], _LabelBest] = {}
        self._branch_cache: dict[tuple[int, float], tuple[float, tuple[int, ...], tuple[_LabelBest, ...]]] = {}
        self._chord_cache: dict[int, list[tuple[float, float, float, float]]] = {}

    def _curve(self, k: int, label: int):
        key = (k, label)
        if key not in self._curves:
            if self.model.counts[k, label] == 0:
                self._curves[key] = None
            else:
                fr = self.model.frac_grid[k, label]
                vals = self.model.psi_grid[k, :, label, :]  # (K, M+1)
                xs = np.concatenate([[0.0], fr[1:]])
                ys = np.column_stack([vals[:, 1], vals[:, 1:]])  # (K, M+2)
                xs_u, idx = np.unique(xs, return_index=True)
                self._curves[key] = (xs_u, ys[:, idx], float(vals[k, -1]))
        return self._curves[key]

    def _gains_at(self, xs: np.ndarray, ys: np.ndarray, k: int, pts: np.ndarray) -> np.ndarray:
        g = np.vstack([np.interp(pts, xs, ys[j]) for j in range(self.k_n)])
        return g - g[k]  # (K, P)

    def label_best(self, k: int, label: int, beta: float) -> _LabelBest:
        key = (k, label, beta)
        hit = self._label_cache.get(key)
        if hit is not None:
            return hit
        e_k = np.zeros(self.k_n)
        e_k[k] = 1.0
        curve = self._curve(k, label)
        if curve is None:
            result = _LabelBest(0.0, 0.0, e_k, 0.0)
            self._label_cache[key] = result
            return result
        xs, ys, base_acc = curve
        costs = self.costs

        # One shared evaluation grid covering every case's breakpoints.
        extra = [beta / costs[i] for i in range(self.k_n) if i != k and costs[i] > 0.0]
        pts = np.unique(
            np.clip(np.concatenate([xs, np.linspace(0.0, 1.0, 65), np.asarray(extra)]), 0.0, 1.0)
        )
        mids = (pts[:-1] + pts[1:]) / 2.0
        grid = np.unique(np.concatenate([pts, mids]))

        def config_values(points: np.ndarray) -> list[tuple[np.ndarray, int, int, int]]:
            """(values, rank, i, j) per case configuration; nan outside domain."""
            gains = self._gains_at(xs, ys, k, points)
            out = []
            for i in range(self.k_n):
                if i == k:
                    continue
                coeff = np.minimum(beta / costs[i], points) if costs[i] > 0 else points
                out.append((base_acc + coeff * gains[i], 1, i, i))
            for i in range(self.k_n):
                if i == k:
                    continue
                for j in range(self.k_n):
                    if j in (k, i) or not costs[i] > costs[j]:
                        continue
                    lo = beta / costs[i]
                    hi = min(beta / costs[j], 1.0) if costs[j] > 0 else 1.0
                    if lo > 1.0 or hi < lo:
                        continue
                    vals = (
                        base_acc
                        + ((beta - points * costs[j]) * gains[i] + (points * costs[i] - beta) * gains[j])
                        / (costs[i] - costs[j])
                    )
                    vals = np.where((points >= lo - 1e-15) & (points <= hi + 1e-15), vals, np.nan)
                    out.append((vals, 2, i, j))
            return out

        candidates: list[tuple[float, float, int, int, int]] = [(base_acc, 0.0, 0, k, k)]
        grid_vals = config_values(grid)
        vertex_pts: list[float] = []
        for vals, rank, i, j in grid_vals:
            ok = np.isfinite(vals)
            for idx in np.flatnonzero(ok):
                candidates.append((float(vals[idx]), float(grid[idx]), rank, i, j))
            # Exact per-interval refinement: three points of one quadratic
            # piece determine its stationary point.
            for a in range(len(grid) - 2):
                if not (ok[a] and ok[a + 1] and ok[a + 2]):
                    continue
                x0, xm, x1 = grid[a], grid[a + 1], grid[a + 2]
                f0, fm, f1 = vals[a], vals[a + 1], vals[a + 2]
                d1 = (xm - x0) * (fm - f1)
                d2 = (xm - x1) * (fm - f0)
                denom = d1 - d2
                if abs(denom) < 1e-15:
                    continue
                v = xm - 0.5 * ((xm - x0) * d1 - (xm - x1) * d2) / denom
                if x0 < v < x1:
                    vertex_pts.append(float(v))
        if vertex_pts:
            vp = np.asarray(sorted(set(vertex_pts)))
            for vals, rank, i, j in config_values(vp):
                for idx in np.flatnonzero(np.isfinite(vals)):
                    candidates.append((float(vals[idx]), float(vp[idx]), rank, i, j))

        value, frac, rank, i, j = min(candidates, key=lambda t: (-t[0], t[1], t[2], t[3], t[4]))
        if rank == 0 or frac <= 0.0:
            result = _LabelBest(float(base_acc), 0.0, e_k, 0.0)
        else:
            pi = np.zeros(self.k_n)
            if rank == 1:
                mass = 1.0 if costs[i] == 0.0 else min(1.0, beta / (frac * costs[i]))
                pi[i] = mass
                pi[k] += 1.0 - mass
            else:
                share = (beta / frac - costs[j]) / (costs[i] - costs[j])
                share = min(1.0, max(0.0, share))
                pi[i] = share
                pi[j] = 1.0 - share
            result = _LabelBest(float(value), float(frac), pi, level_at_fraction(self.model, k, label, frac))
        self._label_cache[key] = result
        return result

    def branch_value(self, k: int, b_prime: float) -> tuple[float, tuple[int, ...], tuple[_LabelBest, ...]]:
        b_prime = min(b_prime, self.span)
        key = (k, b_prime)
        hit = self._branch_cache.get(key)
        if hit is not None:
            return hit
        m = self.grid_m
        after = max(b_prime - self.costs[k], 0.0)
        weights = self.model.a_hat[k]
        l_n = self.model.n_labels
        table = [
            [self.label_best(k, l, t * after / m) for t in range(m + 1)]
            for l in range(l_n)
        ]
        best_val, best_t = -math.inf, None
        for combo in _compositions(m, l_n):
            v = sum(weights[l] * table[l][combo[l]].value for l in range(l_n))
            if v > best_val or (v == best_val and combo > best_t):
                best_val, best_t = v, combo
        sols = tuple(table[l][best_t[l]] for l in range(l_n))
        out = (float(best_val), best_t, sols)
        self._branch_cache[key] = out
        return out

    def knot_chords(self, k: int) -> list[tuple[float, float, float, float]]:
        """Piecewise-linear surface the mixture family is defined over.

        Knot values come from this search's own branch solver; the chord
        construction (zero below the base cost, a ramp from the base cost
        to the first knot at or above it, clamped past the last knot) is
        part of the family definition.
        """
        if k in self._chord_cache:
            return self._chord_cache[k]
        m = self.grid_m
        span = self.span
        theta = [i * span / m for i in range(m + 1)] if span > 0 else [0.0] * (m + 1)
        c_k = float(self.costs[k])
        tol = 1e-12 * max(1.0, span)
        vals = [self.branch_value(k, t)[0] if t >= c_k - tol else 0.0 for t in theta]
        first = next(i for i, t in enumerate(theta) if t >= c_k - tol)
        pieces: list[tuple[float, float, float, float]] = []
        if theta[first] > c_k + tol:
            if c_k > 0.0:
                pieces.append((0.0, c_k, 0.0, 0.0))
            ramp = vals[first] / (theta[first] - c_k)
            pieces.append((c_k, theta[first], ramp, -ramp * c_k))
        elif theta[first] > tol:
            pieces.append((0.0, theta[first], 0.0, 0.0))
        for i in range(first, m):
            if theta[i + 1] - theta[i] <= tol:
                continue
            slope = (vals[i + 1] - vals[i]) / (theta[i + 1] - theta[i])
            pieces.append((theta[i], theta[i + 1], slope, vals[i] - slope * theta[i]))
        pieces.append((theta[m], math.inf, 0.0, vals[m]))
        self._chord_cache[k] = pieces
        return pieces

    def chord_value(self, k: int, x: float) -> float:
        if x < 0.0:
            return 0.0
        tol = 1e-12 * max(1.0, self.span)
        best = 0.0
        for lo, hi, slope, icept in self.knot_chords(k):
            if lo - tol <= x <= hi + tol:
                best = max(best, icept + slope * x)
        return best


def _theta_candidates(search: _Search, i: int, grid_m: int) -> list[float]:
    span = search.span
    knots = [m * span / grid_m for m in range(grid_m + 1)] if span > 0 else [0.0]
    return sorted(set(knots + [float(search.costs[i]), 0.0]))


def brute_force_optimal(
    dataset: AnnotatedDataset,
    catalog: ServiceCatalog,
    budget: float,
    grid_m: int,
    p_grid_steps: int = 10,
) -> OracleResult:
    """Exhaustive search of the discretized strategy family on a tiny instance.

    The mixture mesh combines uniform grids with the structural candidates
    where value-function pieces are tight (knot-ratio mixture weights,
    knot-aligned budget shares), which is where piecewise-linear optima
    live. Branch budgets are capped at the value-function span, matching
    the clamped evaluator that defines the family.
    """
    k_n, l_n = catalog.n_services, catalog.n_labels
    if k_n > _GUARD_RAILS["n_services"] or l_n > _GUARD_RAILS["n_labels"]:
        raise ValidationError("instance too large for the brute-force oracle")
    if grid_m > _GUARD_RAILS["grid_m"] or p_grid_steps > _GUARD_RAILS["p_grid_steps"]:
        raise ValidationError("grid too fine for the brute-force oracle")
    costs = catalog.unit_costs()
    if budget < float(np.min(costs)) - 1e-12:
        raise InfeasibleBudgetError(f"budget {budget} cannot pay for the cheapest service")

    model = estimate_model(dataset, catalog, grid_m)
    search = _Search(model, catalog, grid_m)

    # Mixture candidates are scored on the chord surface (that is the
    # family the training algorithm optimizes over); only the winner is
    # re-solved into exact branch solutions, mirroring the trainer's final
    # assembly step.
    best_branches: list[tuple[int, float, float]] = []
    best_key: Optional[tuple] = None
    enumerated = 0

    def consider(branches: list[tuple[int, float, float]]) -> None:
        nonlocal best_branches, best_key, enumerated
        enumerated += 1
        value = sum(w * search.chord_value(base, bp) for base, w, bp in branches)
        i1, p1, b1 = branches[0][0], branches[0][1], branches[0][1] * branches[0][2]
        i2 = branches[-1][0]
        spend = sum(w * bp for _, w, bp in branches)
        key = (-value, i1, i2, -p1, -spend, -b1)
        if best_key is None or key < best_key:
            best_key = key
            best_branches = list(branches)

    for i in range(k_n):
        if costs[i] <= budget + 1e-12:
            consider([(i, 1.0, budget)])

    uniform_p = [j / p_grid_steps for j in range(1, p_grid_steps)]
    for i1, i2 in itertools.combinations(range(k_n), 2):
        theta1 = _theta_candidates(search, i1, grid_m)
        theta2 = _theta_candidates(search, i2, grid_m)
        p_cands = set(uniform_p)
        for x1 in theta1:
            for x2 in theta2:
                if x1 != x2:
                    p = (budget - x2) / (x1 - x2)
                    if 0.0 < p < 1.0:
                        p_cands.add(p)
            if x1 > 0:
                p = budget / x1
                if 0.0 < p < 1.0:
                    p_cands.add(p)
        for x2 in theta2:
            if x2 > 0:
                p = 1.0 - budget / x2
                if 0.0 < p < 1.0:
                    p_cands.add(p)
        for p in sorted(p_cands):
            b1_cands = {j * budget / p_grid_steps for j in range(p_grid_steps + 1)}
            b1_cands.update(x1 * p for x1 in theta1)
            b1_cands.update(budget - x2 * (1.0 - p) for x2 in theta2)
            b1_cands.add(budget)
            for b1 in sorted(b1_cands):
                if not 0.0 <= b1 <= budget + 1e-15:
                    continue
                b1 = min(b1, budget)
                b2 = budget - b1
                consider([(i1, p, b1 / p), (i2, 1.0 - p, b2 / (1.0 - p))])

    # Drop branches that cannot pay their own base call; they contribute
    # nothing to the objective by construction.
    live = [(b, w, bp) for b, w, bp in best_branches if bp >= costs[b] - 1e-12 and w > 1e-12]
    if not live:
        cheapest = int(np.argmin(costs))
        live = [(cheapest, 1.0, float(costs[cheapest]))]
    total_w = sum(w for _, w, _ in live)
    live = [(b, w / total_w, bp) for b, w, bp in live]
    best_val = sum(w * search.branch_value(b, min(bp, search.span))[0] for b, w, bp in live)

    base_mix, thresholds, levels, addon = default_strategy_arrays(k_n, l_n)
    branch_meta = []
    for base, weight, b_prime in live:
        _, t_vec, sols = search.branch_value(base, min(b_prime, search.span))
        base_mix[base] += weight
        for l, sol in enumerate(sols):
            if sol.fraction <= 0.0:
                addon[base, l, :] = 0.0
                addon[base, l, base] = 1.0
                continue
            levels[base, l] = sol.level
            thresholds[base, l] = threshold_at_level(model, base, l, sol.level)
            addon[base, l, :] = sol.pi
        branch_meta.append(
            {"service": catalog.services[base].name, "base_index": base,
             "weight": weight, "branch_budget": b_prime, "allocation": list(t_vec)}
        )
    meta = {
        "budget": float(budget),
        "grid_m": grid_m,
        "catalog_fingerprint": catalog.fingerprint(),
        "branches": branch_meta,
        "predicted_accuracy": float(best_val),
        "source": "brute_force",
    }
    strategy = Strategy(base_mix, thresholds, levels, addon, meta)
    return OracleResult(strategy, float(best_val), enumerated)


@dataclass(frozen=True)
class CorpusSpec:
    """Recipe for a synthetic replay corpus.

    accuracy[k][l] is the chance service k answers correctly when the true
    label is l; informativeness[k] in [0, 1] controls how strongly the
    quality score separates correct from incorrect answers (0 makes scores
    independent of correctness).
    """

    n_samples: int
    labels: tuple[str, ...]
    services: tuple[tuple[str, float], ...]  # (name, cost per 10k queries)
    accuracy: tuple[tuple[float, ...], ...]
    informativeness: tuple[float, ...]
    label_weights: Optional[tuple[float, ...]] = None


def generate_synthetic_corpus(spec: CorpusSpec, seed: int) -> tuple[AnnotatedDataset, ServiceCatalog]:
    """Deterministic synthetic corpus; same seed gives a bitwise-equal corpus."""
    k_n, l_n = len(spec.services), len(spec.labels)
    acc = np.asarray(spec.accuracy, dtype=float)
    if acc.shape != (k_n, l_n):
        raise ValidationError(f"accuracy table must be {k_n}x{l_n}, got {acc.shape}")
    if np.any(acc < 0) or np.any(acc > 1):
        raise ValidationError("accuracies must lie in [0, 1]")
    info = np.asarray(spec.informativeness, dtype=float)
    if info.shape != (k_n,) or np.any(info < 0) or np.any(info > 1):
        raise ValidationError("informativeness must be a length-K vector in [0, 1]")

    catalog = ServiceCatalog(
        tuple(Service(name, Decimal(str(cost))) for name, cost in spec.services),
        tuple(spec.labels),
    )
    rng = np.random.default_rng(seed)
    n = spec.n_samples
    weights = None
    if spec.label_weights is not None:
        weights = np.asarray(spec.label_weights, dtype=float)
        weights = weights / weights.sum()
    true = rng.choice(l_n, size=n, p=weights)

    preds = np.empty((k_n, n), dtype=np.int64)
    scores = np.empty((k_n, n))
    for k in range(k_n):
        correct = rng.random(n) < acc[k][true]
        offset = 1 + rng.integers(0, l_n - 1, size=n)
        preds[k] = np.where(correct, true, (true + offset) % l_n)
        noise = rng.random(n)
        skew = np.where(correct, rng.beta(4.0, 1.5, size=n), rng.beta(1.5, 4.0, size=n))
        scores[k] = (1.0 - info[k]) * noise + info[k] * skew

    samples = tuple(
        AnnotatedSample(
            sample_id=f"s{idx:06d}",
            true_label=spec.labels[true[idx]],
            predicted=tuple(spec.labels[preds[k, idx]] for k in range(k_n)),
            scores=tuple(float(scores[k, idx]) for k in range(k_n)),
        )
        for idx in range(n)
    )
    return AnnotatedDataset(samples, catalog.fingerprint()), catalog


def bundled_demo_spec(n_samples: int = 4000) -> CorpusSpec:
    """Canonical demo corpus: a cheap-but-decent local model with a highly
    informative score, plus two pricier services that are flat-out better."""
    return CorpusSpec(
        n_samples=n_samples,
        labels=("joy", "sadness", "surprise"),
        services=(("local_model", 0.5), ("midprice_api", 50.0), ("premium_api", 100.0)),
        accuracy=(
            (0.70, 0.74, 0.66),
            (0.76, 0.75, 0.72),
            (0.82, 0.80, 0.79),
        ),
        informativeness=(0.95, 0.6, 0.6),
    )


def bundled_demo_corpus(seed: int = 2024) -> tuple[AnnotatedDataset, ServiceCatalog]:
    return generate_synthetic_corpus(bundled_demo_spec(), seed)
