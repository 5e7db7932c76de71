"""Empirical model estimation on a quantile grid.

From a replay corpus we estimate, for every service k and label l:

  * label marginals  a_hat[k, l] = P[service k predicts l],
  * the grid of empirical score quantiles at levels m/M conditional on
    k predicting l,
  * conditional-accuracy tables psi[k1, k2, l, m]: the accuracy of
    service k2 on the samples where k1 predicted l with a score in the
    bottom m/M quantile of that conditional score distribution,
  * the realized escalation fractions frac[k, l, m]: the share of k's
    l-predictions whose score is <= the m-th grid quantile. Ties and
    rounding make this differ from m/M by O(1/n); carrying the exact
    fraction is what lets predicted metrics match replay exactly at grid
    knots.

Between grid knots every quantity is interpolated linearly; an empty
conditional cell (service never predicts the label, or the level-0 knot,
whose escalated set is empty by construction) is stored as 0 and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .catalog import ServiceCatalog
from .dataset import NEVER_ESCALATE_SENTINEL, AnnotatedDataset, check_fingerprint, to_arrays
from .errors import ValidationError


@dataclass(frozen=True)
class EstimatedModel:
    a_hat: np.ndarray            # (K, L) label marginals per service
    quantile_grid: np.ndarray    # (K, L, M+1) score quantiles; sentinel at m=0
    psi_grid: np.ndarray         # (K, K, L, M+1) conditional accuracies
    frac_grid: np.ndarray        # (K, L, M+1) realized escalation fractions
    populated: np.ndarray        # (K, L, M+1) True where the cell had samples
    counts: np.ndarray           # (K, L) conditional sample counts
    escalated_counts: np.ndarray  # (K, L, M+1) samples below each grid quantile
    sorted_scores: tuple[tuple[np.ndarray, ...], ...]  # per (k, l), ascending
    grid_m: int
    labels: tuple[str, ...]
    catalog_fingerprint: str

    @property
    def n_services(self) -> int:
        return self.a_hat.shape[0]

    @property
    def n_labels(self) -> int:
        return self.a_hat.shape[1]

    def grid_levels(self) -> np.ndarray:
        return np.arange(self.grid_m + 1) / self.grid_m


def estimate_from_arrays(
    pred_idx: np.ndarray,
    correct: np.ndarray,
    scores: np.ndarray,
    n_labels: int,
    grid_m: int,
    labels: tuple[str, ...],
    fingerprint: str,
) -> EstimatedModel:
    """Core counting estimator over index-encoded annotations."""
    if grid_m < 1:
        raise ValidationError(f"grid resolution must be >= 1, got {grid_m}")
    k_n, n = pred_idx.shape
    m_n = grid_m + 1
    a_hat = np.zeros((k_n, n_labels))
    quant = np.full((k_n, n_labels, m_n), NEVER_ESCALATE_SENTINEL)
    psi = np.zeros((k_n, k_n, n_labels, m_n))
    frac = np.zeros((k_n, n_labels, m_n))
    populated = np.zeros((k_n, n_labels, m_n), dtype=bool)
    counts = np.zeros((k_n, n_labels), dtype=np.int64)
    esc_counts = np.zeros((k_n, n_labels, m_n), dtype=np.int64)
    sorted_scores: list[tuple[np.ndarray, ...]] = []

    levels = np.arange(m_n) / grid_m
    for k1 in range(k_n):
        per_label: list[np.ndarray] = []
        for l in range(n_labels):
            mask = pred_idx[k1] == l
            n_l = int(mask.sum())
            counts[k1, l] = n_l
            a_hat[k1, l] = n_l / n
            if n_l == 0:
                per_label.append(np.empty(0))
                continue
            sc = scores[k1, mask]
            order = np.argsort(sc, kind="stable")
            sc_sorted = sc[order]
            sc_sorted.setflags(write=False)
            per_label.append(sc_sorted)
            # Prefix sums of each service's correctness in score order give
            # every conditional accuracy in one pass.
            cum = np.cumsum(correct[:, mask][:, order], axis=1)
            for m in range(1, m_n):
                rank = max(1, int(np.ceil(levels[m] * n_l - 1e-9)))
                q = sc_sorted[min(rank, n_l) - 1]
                e = int(np.searchsorted(sc_sorted, q, side="right"))
                quant[k1, l, m] = q
                esc_counts[k1, l, m] = e
                frac[k1, l, m] = e / n_l
                populated[k1, l, m] = True
                psi[k1, :, l, m] = cum[:, e - 1] / e
        sorted_scores.append(tuple(per_label))

    model = EstimatedModel(
        a_hat=a_hat,
        quantile_grid=quant,
        psi_grid=psi,
        frac_grid=frac,
        populated=populated,
        counts=counts,
        escalated_counts=esc_counts,
        sorted_scores=tuple(sorted_scores),
        grid_m=grid_m,
        labels=labels,
        catalog_fingerprint=fingerprint,
    )
    for arr in (a_hat, quant, psi, frac, populated, counts, esc_counts):
        arr.setflags(write=False)
    return model


def estimate_model(dataset: AnnotatedDataset, catalog: ServiceCatalog, grid_m: int = 10) -> EstimatedModel:
    """Estimate the full model for a catalog from a replay corpus."""
    arrays = to_arrays(dataset, catalog)
    return estimate_from_arrays(
        arrays["pred_idx"],
        arrays["correct"],
        arrays["scores"],
        catalog.n_labels,
        grid_m,
        catalog.labels,
        dataset.catalog_fingerprint,
    )


def merge_labels(dataset: AnnotatedDataset, catalog: ServiceCatalog, grid_m: int) -> EstimatedModel:
    """Estimate with all predicted labels collapsed into one class.

    Correctness still compares the original predictions against the truth;
    only the conditioning (and thereby thresholds and budget splits)
    ignores the predicted label. Used for the universal-threshold
    restriction.
    """
    arrays = to_arrays(dataset, catalog)
    merged_pred = np.zeros_like(arrays["pred_idx"])
    return estimate_from_arrays(
        merged_pred,
        arrays["correct"],
        arrays["scores"],
        1,
        grid_m,
        ("__all__",),
        dataset.catalog_fingerprint,
    )


def psi(model: EstimatedModel, k1: int, k2: int, label: int, alpha: float) -> float:
    """Conditional accuracy of k2 on k1's bottom-alpha slice, interpolated.

    Piecewise linear between populated grid knots; constant beyond the
    populated range (the level-0 knot is always empty, so small alphas
    inherit the first populated value).
    """
    pop = model.populated[k1, label]
    if not pop.any():
        return 0.0
    xs = model.grid_levels()[pop]
    ys = model.psi_grid[k1, k2, label][pop]
    return float(np.interp(alpha, xs, ys))


def base_accuracy(model: EstimatedModel, k: int, label: int) -> float:
    """Unconditional accuracy of service k on the samples it labels `label`."""
    return psi(model, k, k, label, 1.0)


def r_tilde(model: EstimatedModel, k: int, label: int, level: float) -> np.ndarray:
    """Accuracy gain vector of switching from base k to each add-on.

    Component j is psi(k, j, label, level) - psi(k, k, label, level);
    component k is exactly zero.
    """
    own = psi(model, k, k, label, level)
    return np.array([psi(model, k, j, label, level) - own for j in range(model.n_services)])


def escalation_fraction(model: EstimatedModel, k: int, label: int, level: float) -> float:
    """Realized share of k's label-predictions escalated at a quantile level."""
    return float(np.interp(level, model.grid_levels(), model.frac_grid[k, label]))


def level_at_fraction(model: EstimatedModel, k: int, label: int, fraction: float) -> float:
    """Inverse of escalation_fraction (smallest level on flat stretches)."""
    if fraction <= 0.0:
        return 0.0
    fr = model.frac_grid[k, label]
    levels = model.grid_levels()
    j = int(np.searchsorted(fr, fraction, side="left"))
    if j <= model.grid_m and fr[j] == fraction:
        return float(levels[j])
    lo, hi = j - 1, j
    return float(levels[lo] + (levels[hi] - levels[lo]) * (fraction - fr[lo]) / (fr[hi] - fr[lo]))


def threshold_at_level(model: EstimatedModel, k: int, label: int, level: float) -> float:
    """Nearest-rank score threshold for a quantile level, from raw scores."""
    if level <= 0.0:
        return NEVER_ESCALATE_SENTINEL
    sc = model.sorted_scores[k][label]
    if sc.size == 0:
        return NEVER_ESCALATE_SENTINEL
    rank = max(1, int(np.ceil(level * sc.size - 1e-9)))
    return float(sc[min(rank, sc.size) - 1])


def model_dump(model: EstimatedModel, catalog: ServiceCatalog) -> str:
    """Human-readable dump of the estimated tables (for the inspect CLI)."""
    lines = [
        f"grid resolution M = {model.grid_m}",
        f"services = {catalog.n_services}, labels = {model.n_labels}",
        "",
        "label marginals a_hat[k, l]:",
    ]
    for k, svc in enumerate(catalog.services):
        row = ", ".join(f"{model.labels[l]}={model.a_hat[k, l]:.4f}" for l in range(model.n_labels))
        lines.append(f"  {svc.name}: {row}")
    lines.append("")
    lines.append("conditional counts / missing cells:")
    for k, svc in enumerate(catalog.services):
        for l in range(model.n_labels):
            n_l = int(model.counts[k, l])
            flag = "" if n_l else "  [no samples: psi row flagged missing]"
            lines.append(f"  {svc.name} / {model.labels[l]}: n={n_l}{flag}")
    lines.append("")
    lines.append("quantile grid (levels m/M):")
    for k, svc in enumerate(catalog.services):
        for l in range(model.n_labels):
            if model.counts[k, l] == 0:
                continue
            vals = ", ".join(f"{q:.4f}" for q in model.quantile_grid[k, l, 1:])
            lines.append(f"  {svc.name} / {model.labels[l]}: [{vals}]")
    lines.append("")
    lines.append("own-accuracy psi[k, k, l, m] at grid knots:")
    for k, svc in enumerate(catalog.services):
        for l in range(model.n_labels):
            if model.counts[k, l] == 0:
                continue
            vals = ", ".join(f"{v:.4f}" for v in model.psi_grid[k, k, l, 1:])
            lines.append(f"  {svc.name} / {model.labels[l]}: [{vals}]")
    return "\n".join(lines)
