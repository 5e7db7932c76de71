"""Per-base optimization: label solutions, budget allocation, value functions.

For a fixed base service k and predicted label l, the decision is how
aggressively to escalate (which bottom slice of the score distribution)
and where to send escalated queries (a sparse add-on mixture). With nu
denoting the escalated fraction, the objective

    base_accuracy + nu * pi . gain(nu)    s.t.  nu * (off-base cost of pi) <= beta

is maximized in closed form. The gain vector is piecewise linear in nu
(linear interpolation of the conditional-accuracy tables between grid
knots), so each candidate family is piecewise quadratic and the maximum
sits on a knot, a budget kink, or an interior stationary point. The two
candidate families mirror the sparse structure of the problem: a single
add-on with any remainder kept on the base, and a budget-tight pair of
distinct add-ons.

Label budgets for one base are tied together by splitting the after-base
budget b' - c_k into M grid units across labels; the split is solved by
an exact dynamic program. Evaluating the split at the budget knots
m * (2 * max cost) / M and interpolating yields the per-base value
function used by the mixture search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .catalog import ServiceCatalog
from .errors import ValidationError
from .estimation import EstimatedModel, level_at_fraction


@dataclass(frozen=True)
class LabelSolution:
    """Escalation rule for one (base, label) cell.

    level:    quantile level whose empirical quantile is the threshold.
    fraction: realized escalated fraction at that level (what the
              objective and cost accounting actually use).
    pi:       add-on mixture (length K, at most 2 nonzeros).
    h_value:  achieved objective value.
    """

    level: float
    fraction: float
    pi: np.ndarray
    h_value: float


def _quad_candidates(q0: float, q1: float, q2: float, x0: float, x1: float) -> list[tuple[float, float]]:
    """Max candidates of q0 + q1*x + q2*x^2 on [x0, x1]: endpoints plus the
    interior vertex when the parabola opens downward."""
    xs = [x0] if x1 <= x0 else [x0, x1]
    if q2 < 0.0:
        vertex = -q1 / (2.0 * q2)
        if x0 < vertex < x1:
            xs.append(vertex)
    return [(q0 + q1 * x + q2 * x * x, x) for x in xs]


@dataclass(frozen=True)
class _LabelView:
    nu: np.ndarray    # strictly increasing fraction knots, nu[0] = 0, nu[-1] = 1
    vals: np.ndarray  # (J, K) conditional accuracies of every service at each knot
    base_acc: float


def _label_view(model: EstimatedModel, k: int, label: int) -> Optional[_LabelView]:
    n_l = int(model.counts[k, label])
    if n_l == 0:
        return None
    m = model.grid_m
    fr = model.frac_grid[k, label]
    psis = model.psi_grid[k, :, label, :]  # (K, M+1)
    # The level-0 knot has an empty escalated set; small fractions inherit
    # the first populated knot's accuracies (constant extension). Equal
    # fractions at consecutive knots come from score ties and carry
    # identical accuracy rows, so duplicates collapse.
    nus = [0.0]
    rows = [psis[:, 1]]
    for mm in range(1, m + 1):
        if fr[mm] > nus[-1]:
            nus.append(float(fr[mm]))
            rows.append(psis[:, mm])
    return _LabelView(np.asarray(nus), np.vstack(rows), float(psis[k, m]))


def solve_fixed_base_label(
    model: EstimatedModel, k: int, label: int, beta: float, catalog: ServiceCatalog
) -> LabelSolution:
    """Best escalation rule for base k on one predicted label, budget beta.

    Always feasible: keeping everything on the base costs nothing. Ties are
    broken toward smaller escalated fraction, then the single-add-on family,
    then smaller add-on indices.
    """
    k_n = model.n_services
    e_k = np.zeros(k_n)
    e_k[k] = 1.0
    view = _label_view(model, k, label)
    if view is None:
        return LabelSolution(0.0, 0.0, e_k, 0.0)

    base_acc = view.base_acc
    costs = catalog.unit_costs()
    nu = view.nu
    gain = view.vals - view.vals[:, k][:, np.newaxis]  # (J, K), column k is zero

    # Candidate tuples: (value, fraction, family_rank, i, j). family_rank 0
    # is the never-escalate baseline so exact ties resolve to it.
    candidates: list[tuple[float, float, int, int, int]] = [(base_acc, 0.0, 0, k, k)]

    for i in range(k_n):
        if i == k:
            continue
        c_i = costs[i]
        kink = beta / c_i if c_i > 0.0 else math.inf
        for seg in range(len(nu) - 1):
            x_lo, x_hi = float(nu[seg]), float(nu[seg + 1])
            slope = (gain[seg + 1, i] - gain[seg, i]) / (x_hi - x_lo)
            icept = gain[seg, i] - slope * x_lo
            bounds = [x_lo, x_hi]
            if x_lo < kink < x_hi:
                bounds = [x_lo, kink, x_hi]
            for b0, b1 in zip(bounds[:-1], bounds[1:]):
                if (b0 + b1) / 2.0 <= kink:
                    # Budget slack: full mass on the add-on, quadratic in nu.
                    quad = _quad_candidates(base_acc, icept, slope, b0, b1)
                else:
                    # Budget binding: effective mass beta/(nu*c_i), linear.
                    quad = _quad_candidates(base_acc + kink * icept, kink * slope, 0.0, b0, b1)
                candidates += [(v, x, 1, i, i) for v, x in quad]

    for i in range(k_n):
        if i == k:
            continue
        for j in range(k_n):
            if j in (k, i):
                continue
            c_i, c_j = costs[i], costs[j]
            if not c_i > c_j:
                continue
            lo = beta / c_i
            hi = min(beta / c_j, 1.0) if c_j > 0.0 else 1.0
            if lo > 1.0 or hi < lo:
                continue
            delta = c_i - c_j
            for seg in range(len(nu) - 1):
                x_lo = max(float(nu[seg]), lo)
                x_hi = min(float(nu[seg + 1]), hi)
                if x_hi < x_lo:
                    continue
                s_i = (gain[seg + 1, i] - gain[seg, i]) / (nu[seg + 1] - nu[seg])
                a_i = gain[seg, i] - s_i * nu[seg]
                s_j = (gain[seg + 1, j] - gain[seg, j]) / (nu[seg + 1] - nu[seg])
                a_j = gain[seg, j] - s_j * nu[seg]
                q0 = base_acc + beta * (a_i - a_j) / delta
                q1 = (beta * s_i - c_j * a_i + c_i * a_j - beta * s_j) / delta
                q2 = (c_i * s_j - c_j * s_i) / delta
                candidates += [(v, x, 2, i, j) for v, x in _quad_candidates(q0, q1, q2, x_lo, x_hi)]

    value, frac, rank, i, j = min(candidates, key=lambda t: (-t[0], t[1], t[2], t[3], t[4]))
    if rank == 0 or frac <= 0.0:
        return LabelSolution(0.0, 0.0, e_k, base_acc)

    pi = np.zeros(k_n)
    if rank == 1:
        mass = 1.0 if costs[i] == 0.0 else min(1.0, beta / (frac * costs[i]))
        pi[i] = mass
        pi[k] += 1.0 - mass
    else:
        share = (beta / frac - costs[j]) / (costs[i] - costs[j])
        share = min(1.0, max(0.0, share))
        pi[i] = share
        pi[j] = 1.0 - share
    level = level_at_fraction(model, k, label, frac)
    return LabelSolution(level, frac, pi, float(value))


@dataclass(frozen=True)
class Allocation:
    """Budget split of one base's after-base budget across labels."""

    t: tuple[int, ...]
    g_value: float
    betas: tuple[float, ...]
    solutions: tuple[LabelSolution, ...]


def allocate_label_budgets(
    model: EstimatedModel, k: int, b_prime: float, grid_m: int, catalog: ServiceCatalog
) -> Allocation:
    """Split b' - c_k into grid units across labels, maximizing the marginal-
    weighted sum of label values. Exact dynamic program over labels; the
    objective is separable so the optimum matches exhaustive enumeration.
    Ties resolve to the lexicographically greatest unit vector.
    """
    costs = catalog.unit_costs()
    span = b_prime - costs[k]
    if span < -1e-9 * max(1.0, b_prime):
        raise ValidationError(f"budget {b_prime} cannot pay base cost {costs[k]}")
    span = max(span, 0.0)
    betas = [m * span / grid_m for m in range(grid_m + 1)]
    l_n = model.n_labels
    sols = [
        [solve_fixed_base_label(model, k, l, beta, catalog) for beta in betas]
        for l in range(l_n)
    ]
    weights = model.a_hat[k]

    neg = -math.inf
    suffix = np.full((l_n + 1, grid_m + 1), neg)
    suffix[l_n, 0] = 0.0
    choice = np.zeros((l_n, grid_m + 1), dtype=int)
    for l in range(l_n - 1, -1, -1):
        for units in range(grid_m + 1):
            best_v, best_t = neg, -1
            for t in range(units, -1, -1):
                rest = suffix[l + 1, units - t]
                if rest == neg:
                    continue
                v = weights[l] * sols[l][t].h_value + rest
                if v > best_v:
                    best_v, best_t = v, t
            suffix[l, units] = best_v
            choice[l, units] = best_t

    units = grid_m
    t_vec: list[int] = []
    for l in range(l_n):
        t = int(choice[l, units])
        t_vec.append(t)
        units -= t
    return Allocation(
        t=tuple(t_vec),
        g_value=float(suffix[0, grid_m]),
        betas=tuple(betas),
        solutions=tuple(sols[l][t_vec[l]] for l in range(l_n)),
    )


@dataclass(frozen=True)
class GFunction:
    """Piecewise-linear value function of one base service.

    Knot budgets are m * span / M with span = twice the dearest unit cost;
    knots strictly below the base cost are pinned to zero (the base cannot
    even be called there). Between the base cost and the first knot at or
    above it the function ramps from zero; beyond the last knot it is
    clamped (every label solution has saturated by then under the
    unit-split budget rule). Pieces are (lo, hi, slope, intercept) with the
    final piece extending to infinity.
    """

    base_index: int
    base_cost: float
    span: float
    theta: np.ndarray
    values: np.ndarray
    evaluated: np.ndarray
    allocations: tuple[Optional[Allocation], ...]
    pieces: tuple[tuple[float, float, float, float], ...]

    def value(self, x: float) -> float:
        if x < 0.0:
            return 0.0
        tol = 1e-12 * max(1.0, self.span)
        best = 0.0
        for lo, hi, slope, icept in self.pieces:
            if lo - tol <= x <= hi + tol:
                best = max(best, icept + slope * x)
        return best


def build_g_function(
    model: EstimatedModel, i: int, grid_m: int, catalog: ServiceCatalog
) -> GFunction:
    costs = catalog.unit_costs()
    span = 2.0 * float(np.max(costs))
    c_i = float(costs[i])
    theta = np.arange(grid_m + 1) * (span / grid_m) if span > 0 else np.zeros(grid_m + 1)
    tol = 1e-12 * max(1.0, span)

    values = np.zeros(grid_m + 1)
    evaluated = np.zeros(grid_m + 1, dtype=bool)
    allocations: list[Optional[Allocation]] = []
    for m in range(grid_m + 1):
        if theta[m] >= c_i - tol:
            alloc = allocate_label_budgets(model, i, float(theta[m]), grid_m, catalog)
            values[m] = alloc.g_value
            evaluated[m] = True
            allocations.append(alloc)
        else:
            allocations.append(None)

    first = int(np.argmax(evaluated))
    pieces: list[tuple[float, float, float, float]] = []
    if theta[first] > c_i + tol:
        if c_i > 0.0:
            pieces.append((0.0, c_i, 0.0, 0.0))
        ramp = values[first] / (theta[first] - c_i)
        pieces.append((c_i, float(theta[first]), ramp, -ramp * c_i))
    elif theta[first] > tol:
        # A knot sits at the base cost itself; below it the value is zero.
        pieces.append((0.0, float(theta[first]), 0.0, 0.0))
    for m in range(first, grid_m):
        lo, hi = float(theta[m]), float(theta[m + 1])
        if hi - lo <= tol:
            continue
        slope = (values[m + 1] - values[m]) / (hi - lo)
        pieces.append((lo, hi, slope, values[m] - slope * lo))
    pieces.append((float(theta[grid_m]), math.inf, 0.0, float(values[grid_m])))

    values.setflags(write=False)
    evaluated.setflags(write=False)
    return GFunction(
        base_index=i,
        base_cost=c_i,
        span=span,
        theta=theta,
        values=values,
        evaluated=evaluated,
        allocations=tuple(allocations),
        pieces=tuple(pieces),
    )
