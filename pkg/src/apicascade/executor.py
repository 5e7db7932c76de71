"""Strategy execution against replay corpora.

Three evaluation modes: per-query sampling (draws the base and add-on
from their mixtures), exact expectation (sums the finitely many branch
weights per sample, no randomness), and strict per-query budgeting (falls
back to the cheapest service whenever the learned strategy's worst-case
cost would breach the accrued allowance). Plus budget sweeps and the two
reference baselines.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .catalog import ServiceCatalog, Strategy
from .dataset import AnnotatedDataset, AnnotatedSample, check_fingerprint, to_arrays
from .errors import CascadeError, FingerprintMismatchError, ValidationError
from .estimation import estimate_model
from .master import SolverConfig, predict_performance, train


@dataclass(frozen=True)
class ExecutionTrace:
    """Everything one query did: services called, prediction, cost."""

    base_index: int
    escalated: bool
    addon_index: Optional[int]
    prediction: str
    cost: float
    correct: bool


@dataclass(frozen=True)
class EvaluationReport:
    accuracy: float
    mean_cost: float
    total_spend: float
    sample_count: int
    mode: str
    per_label_accuracy: Mapping[str, float]
    escalation_rates: Mapping[str, float]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_cost": self.mean_cost,
            "total_spend": self.total_spend,
            "sample_count": self.sample_count,
            "mode": self.mode,
            "per_label_accuracy": dict(self.per_label_accuracy),
            "escalation_rates": dict(self.escalation_rates),
        }

    def format_text(self) -> str:
        lines = [
            f"mode:        {self.mode}",
            f"samples:     {self.sample_count}",
            f"accuracy:    {self.accuracy:.6f}",
            f"mean cost:   {self.mean_cost:.8f}",
            f"total spend: {self.total_spend:.6f}",
        ]
        if self.per_label_accuracy:
            lines.append("per-label accuracy:")
            for lab, acc in self.per_label_accuracy.items():
                lines.append(f"  {lab}: {acc:.6f}")
        if self.escalation_rates:
            lines.append("escalation rate per (base, predicted label):")
            for key, rate in self.escalation_rates.items():
                lines.append(f"  {key}: {rate:.6f}")
        return "\n".join(lines)


def _check_strategy(strategy: Strategy, catalog: ServiceCatalog) -> None:
    fp = strategy.meta.get("catalog_fingerprint")
    if fp is not None and fp != catalog.fingerprint():
        raise FingerprintMismatchError("strategy belongs to a different catalog")


def _should_escalate(strategy: Strategy, base: int, label_idx: int, score: float) -> bool:
    # A level of 0 means the threshold was never learned (or the solver
    # chose to keep everything on the base); it never fires, even for
    # scores of exactly 0.
    return (
        strategy.threshold_levels[base, label_idx] > 0.0
        and score <= strategy.thresholds[base, label_idx]
    )


def execute_query(
    strategy: Strategy,
    sample: AnnotatedSample,
    catalog: ServiceCatalog,
    rng: np.random.Generator,
) -> ExecutionTrace:
    """Run one query: sample a base, maybe escalate, sample an add-on."""
    costs = catalog.unit_costs()
    base = int(rng.choice(catalog.n_services, p=strategy.base_mixture))
    pred = sample.predicted[base]
    score = sample.scores[base]
    try:
        label_idx = catalog.label_index(pred)
    except KeyError:
        # Prediction outside the label space (possible only for datasets
        # ingested in permissive mode elsewhere): keep the base answer.
        return ExecutionTrace(base, False, None, pred, float(costs[base]),
                              pred == sample.true_label)
    if not _should_escalate(strategy, base, label_idx, score):
        return ExecutionTrace(base, False, None, pred, float(costs[base]),
                              pred == sample.true_label)
    addon = int(rng.choice(catalog.n_services, p=strategy.addon[base, label_idx]))
    if addon == base:
        # Escalation routed back to the base: no second call, keep answer.
        return ExecutionTrace(base, True, base, pred, float(costs[base]),
                              pred == sample.true_label)
    pred2 = sample.predicted[addon]
    return ExecutionTrace(
        base, True, addon, pred2, float(costs[base] + costs[addon]),
        pred2 == sample.true_label,
    )


def exact_replay_expectation(
    strategy: Strategy, dataset: AnnotatedDataset, catalog: ServiceCatalog
) -> tuple[float, float]:
    """Expected (accuracy, cost) over the corpus, with mixtures summed out.

    No sampling: per sample there are at most two base branches and two
    add-on branches, each weighted by its mixture probability.
    """
    _check_strategy(strategy, catalog)
    arrays = to_arrays(dataset, catalog)
    costs = catalog.unit_costs()
    n = len(dataset)
    acc = 0.0
    cost = 0.0
    for base in strategy.active_bases():
        p = float(strategy.base_mixture[base])
        labels = arrays["pred_idx"][base]
        scores = arrays["scores"][base]
        esc = (strategy.threshold_levels[base][labels] > 0.0) & (
            scores <= strategy.thresholds[base][labels]
        )
        correct_base = arrays["correct"][base].astype(float)
        weights = strategy.addon[base][labels]  # (N, K)
        addon_acc = np.einsum("nk,kn->n", weights, arrays["correct"].astype(float))
        off_base = weights.copy()
        off_base[:, base] = 0.0
        addon_cost = off_base @ costs
        acc += p * float(np.sum(np.where(esc, addon_acc, correct_base)))
        cost += p * float(n * costs[base] + np.sum(np.where(esc, addon_cost, 0.0)))
    return acc / n, cost / n


def _expectation_report(
    strategy: Strategy, dataset: AnnotatedDataset, catalog: ServiceCatalog
) -> EvaluationReport:
    _check_strategy(strategy, catalog)
    arrays = to_arrays(dataset, catalog)
    costs = catalog.unit_costs()
    n = len(dataset)
    exp_correct = np.zeros(n)
    exp_cost = np.zeros(n)
    esc_rates: dict[str, float] = {}
    for base in strategy.active_bases():
        p = float(strategy.base_mixture[base])
        labels = arrays["pred_idx"][base]
        scores = arrays["scores"][base]
        esc = (strategy.threshold_levels[base][labels] > 0.0) & (
            scores <= strategy.thresholds[base][labels]
        )
        correct_base = arrays["correct"][base].astype(float)
        weights = strategy.addon[base][labels]
        addon_acc = np.einsum("nk,kn->n", weights, arrays["correct"].astype(float))
        off_base = weights.copy()
        off_base[:, base] = 0.0
        addon_cost = off_base @ costs
        exp_correct += p * np.where(esc, addon_acc, correct_base)
        exp_cost += p * (costs[base] + np.where(esc, addon_cost, 0.0))
        for l in range(catalog.n_labels):
            mask = labels == l
            if mask.any():
                key = f"{catalog.services[base].name}|{catalog.labels[l]}"
                esc_rates[key] = float(esc[mask].mean())
    per_label = {}
    for l, lab in enumerate(catalog.labels):
        mask = arrays["true_idx"] == l
        if mask.any():
            per_label[lab] = float(exp_correct[mask].mean())
    return EvaluationReport(
        accuracy=float(exp_correct.mean()),
        mean_cost=float(exp_cost.mean()),
        total_spend=float(exp_cost.sum()),
        sample_count=n,
        mode="expectation",
        per_label_accuracy=per_label,
        escalation_rates=esc_rates,
    )


def _traces_report(
    traces: Sequence[ExecutionTrace],
    dataset: AnnotatedDataset,
    catalog: ServiceCatalog,
    mode: str,
) -> EvaluationReport:
    n = len(traces)
    correct = np.array([t.correct for t in traces], dtype=float)
    cost = np.array([t.cost for t in traces])
    per_label: dict[str, float] = {}
    true_labels = np.array([s.true_label for s in dataset.samples])
    for lab in catalog.labels:
        mask = true_labels == lab
        if mask.any():
            per_label[lab] = float(correct[mask].mean())
    pair_counts: dict[str, list[int]] = {}
    for t, s in zip(traces, dataset.samples):
        key = f"{catalog.services[t.base_index].name}|{s.predicted[t.base_index]}"
        tally = pair_counts.setdefault(key, [0, 0])
        tally[0] += int(t.escalated)
        tally[1] += 1
    esc_rates = {k: c[0] / c[1] for k, c in sorted(pair_counts.items())}
    return EvaluationReport(
        accuracy=float(correct.mean()),
        mean_cost=float(cost.mean()),
        total_spend=float(cost.sum()),
        sample_count=n,
        mode=mode,
        per_label_accuracy=per_label,
        escalation_rates=esc_rates,
    )


def replay_evaluate(
    strategy: Strategy,
    dataset: AnnotatedDataset,
    catalog: ServiceCatalog,
    seed: int = 0,
    mode: str = "expectation",
) -> EvaluationReport:
    """Evaluate a strategy over a corpus in sampled or expectation mode."""
    _check_strategy(strategy, catalog)
    check_fingerprint(dataset, catalog)
    if mode == "expectation":
        return _expectation_report(strategy, dataset, catalog)
    if mode == "sampled":
        rng = np.random.default_rng(seed)
        traces = [execute_query(strategy, s, catalog, rng) for s in dataset.samples]
        return _traces_report(traces, dataset, catalog, "sampled")
    raise ValidationError(f"unknown evaluation mode {mode!r}")


def worst_case_query_cost(strategy: Strategy, catalog: ServiceCatalog) -> float:
    """Dearest possible single-query outcome under the strategy."""
    costs = catalog.unit_costs()
    worst = 0.0
    for base in strategy.active_bases():
        addon_worst = 0.0
        for l in range(strategy.n_labels):
            if strategy.threshold_levels[base, l] <= 0.0:
                continue
            for j in np.flatnonzero(strategy.addon[base, l] > 0.0):
                if int(j) != base:
                    addon_worst = max(addon_worst, float(costs[j]))
        worst = max(worst, float(costs[base]) + addon_worst)
    return worst


def replay_evaluate_strict(
    strategy: Strategy,
    dataset: AnnotatedDataset,
    catalog: ServiceCatalog,
    budget: float,
    seed: int = 0,
) -> EvaluationReport:
    """Replay under a hard per-query accrued allowance.

    Before each query the allowance grows by the budget; whenever the
    strategy's worst-case cost would overdraw it, the query is routed to
    the cheapest service instead. Total spend never exceeds budget * N.
    """
    _check_strategy(strategy, catalog)
    check_fingerprint(dataset, catalog)
    costs = catalog.unit_costs()
    cheapest = int(np.argmin(costs))
    if budget < costs[cheapest] - 1e-12:
        raise ValidationError(
            f"strict budget {budget} is below the cheapest unit cost"
        )
    worst = worst_case_query_cost(strategy, catalog)
    rng = np.random.default_rng(seed)
    spent = 0.0
    traces: list[ExecutionTrace] = []
    for t, sample in enumerate(dataset.samples):
        allowance = budget * (t + 1)
        if spent + worst <= allowance + 1e-12:
            trace = execute_query(strategy, sample, catalog, rng)
        else:
            pred = sample.predicted[cheapest]
            trace = ExecutionTrace(
                cheapest, False, None, pred, float(costs[cheapest]),
                pred == sample.true_label,
            )
        spent += trace.cost
        traces.append(trace)
    return _traces_report(traces, dataset, catalog, "strict")


@dataclass(frozen=True)
class TradeoffPoint:
    budget: float
    predicted_accuracy: float
    predicted_cost: float
    test_accuracy: float
    test_cost: float
    status: str = "ok"


def sweep(
    train_set: AnnotatedDataset,
    test_set: AnnotatedDataset,
    catalog: ServiceCatalog,
    budgets: Sequence[float],
    config: SolverConfig,
) -> tuple[list[TradeoffPoint], list[dict]]:
    """Train one strategy per budget and replay each on the test set.

    Per-budget failures (infeasible budgets) are recorded without aborting
    the rest of the sweep. Also returns one reference row per single
    service, evaluated on the test set.
    """
    points: list[TradeoffPoint] = []
    for budget in budgets:
        cfg = SolverConfig(
            budget=float(budget),
            grid_m=config.grid_m,
            seed=config.seed,
            fixed_base=config.fixed_base,
            uniform_threshold=config.uniform_threshold,
            threads=config.threads,
        )
        try:
            strategy = train(train_set, catalog, cfg)
        except CascadeError as exc:
            points.append(TradeoffPoint(float(budget), math.nan, math.nan, math.nan, math.nan, f"error: {exc}"))
            continue
        test_acc, test_cost = exact_replay_expectation(strategy, test_set, catalog)
        points.append(
            TradeoffPoint(
                float(budget),
                float(strategy.meta["predicted_accuracy"]),
                float(strategy.meta["predicted_cost"]),
                test_acc,
                test_cost,
            )
        )
    references = []
    for k, svc in enumerate(catalog.services):
        report = baseline_single(test_set, k, catalog)
        references.append(
            {"service": svc.name, "test_accuracy": report.accuracy, "test_cost": report.mean_cost}
        )
    return points, references


def tradeoff_csv(points: Sequence[TradeoffPoint], references: Sequence[dict]) -> str:
    out = io.StringIO()
    out.write("kind,name,budget,pred_acc,pred_cost,test_acc,test_cost,status\n")
    for p in points:
        out.write(
            f"strategy,,{p.budget!r},{p.predicted_accuracy!r},{p.predicted_cost!r},"
            f"{p.test_accuracy!r},{p.test_cost!r},{p.status}\n"
        )
    for r in references:
        out.write(
            f"reference,{r['service']},,,,{r['test_accuracy']!r},{r['test_cost']!r},ok\n"
        )
    return out.getvalue()


def baseline_single(
    dataset: AnnotatedDataset, k: int, catalog: ServiceCatalog
) -> EvaluationReport:
    """Always call service k."""
    check_fingerprint(dataset, catalog)
    arrays = to_arrays(dataset, catalog)
    costs = catalog.unit_costs()
    correct = arrays["correct"][k].astype(float)
    per_label = {}
    for l, lab in enumerate(catalog.labels):
        mask = arrays["true_idx"] == l
        if mask.any():
            per_label[lab] = float(correct[mask].mean())
    n = len(dataset)
    return EvaluationReport(
        accuracy=float(correct.mean()),
        mean_cost=float(costs[k]),
        total_spend=float(costs[k] * n),
        sample_count=n,
        mode=f"single:{catalog.services[k].name}",
        per_label_accuracy=per_label,
        escalation_rates={},
    )


def baseline_majority_vote(
    dataset: AnnotatedDataset, catalog: ServiceCatalog, seed: int = 0
) -> EvaluationReport:
    """Confidence-weighted vote across every service.

    Each service's answer becomes a label distribution: its own label gets
    the quality score, every other label shares the remainder evenly. The
    distributions are summed and the argmax wins; ties are broken by a
    seeded draw. Every service is called, so the cost is the sum of all
    unit costs.
    """
    check_fingerprint(dataset, catalog)
    arrays = to_arrays(dataset, catalog)
    costs = catalog.unit_costs()
    k_n, l_n, n = catalog.n_services, catalog.n_labels, len(dataset)
    rng = np.random.default_rng(seed)
    votes = np.zeros((n, l_n))
    for k in range(k_n):
        q = arrays["scores"][k]
        spread = (1.0 - q) / (l_n - 1)
        votes += spread[:, np.newaxis]
        votes[np.arange(n), arrays["pred_idx"][k]] += q - spread
    correct = np.zeros(n)
    winners = np.zeros(n, dtype=int)
    for idx in range(n):
        row = votes[idx]
        top = np.flatnonzero(row >= row.max() - 1e-12)
        winners[idx] = top[0] if len(top) == 1 else int(rng.choice(top))
    correct = (winners == arrays["true_idx"]).astype(float)
    per_label = {}
    for l, lab in enumerate(catalog.labels):
        mask = arrays["true_idx"] == l
        if mask.any():
            per_label[lab] = float(correct[mask].mean())
    total_cost = float(costs.sum())
    return EvaluationReport(
        accuracy=float(correct.mean()),
        mean_cost=total_cost,
        total_spend=total_cost * n,
        sample_count=n,
        mode="majority_vote",
        per_label_accuracy=per_label,
        escalation_rates={},
    )
