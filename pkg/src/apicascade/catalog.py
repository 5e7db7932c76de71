"""Service catalogs and two-stage calling strategies.

A catalog lists the prediction services available for one classification
task, each with a fixed price per query, plus the label space. A strategy
routes a query through the catalog: a base service is drawn from a sparse
mixture, its quality score is compared against a per-(service, label)
threshold, and on escalation a second service is drawn from a sparse
add-on mixture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .errors import (
    DataFormatError,
    FingerprintMismatchError,
    FormatVersionError,
    StructureError,
)

STRATEGY_FORMAT_VERSION = "1"

# Tolerance for probability-simplex sums; trained strategies are exact to
# rounding, so this only absorbs float noise.
SIMPLEX_ATOL = 1e-12


def _to_decimal(value: Any) -> Decimal:
    try:
        return Decimal(str(value))
    except (InvalidOperation, ValueError) as exc:
        raise DataFormatError(f"not a decimal price: {value!r}") from exc


@dataclass(frozen=True)
class Service:
    """One priced prediction service. Prices are quoted per 10,000 queries."""

    name: str
    cost_per_10k: Decimal

    @property
    def unit_cost(self) -> Decimal:
        """Exact price of a single query."""
        return self.cost_per_10k / Decimal(10000)


@dataclass(frozen=True)
class ServiceCatalog:
    """Ordered services plus the label space they predict over.

    Service indices are positional and stable: every derived artifact
    (datasets, models, strategies) addresses services by index, so a
    catalog must never be reordered once artifacts exist. The fingerprint
    guards against that.
    """

    services: tuple[Service, ...]
    labels: tuple[str, ...]
    score_map: Mapping[str, float] | None = None

    def __post_init__(self) -> None:
        if len(self.services) < 1:
            raise StructureError("catalog needs at least one service")
        if len(self.labels) < 2:
            raise StructureError("catalog needs at least two labels")
        names = [s.name for s in self.services]
        if len(set(names)) != len(names):
            raise StructureError("service names must be unique")
        if len(set(self.labels)) != len(self.labels):
            raise StructureError("labels must be unique")
        free = [s.name for s in self.services if s.cost_per_10k == 0]
        if any(s.cost_per_10k < 0 for s in self.services):
            raise StructureError("negative service cost")
        if len(free) > 1:
            raise StructureError(
                f"at most one zero-cost service is allowed, got {free}"
            )

    @property
    def n_services(self) -> int:
        return len(self.services)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def unit_costs(self) -> np.ndarray:
        """Per-query prices as a float vector (index-aligned)."""
        return np.array([float(s.unit_cost) for s in self.services])

    def service_index(self, name: str) -> int:
        for i, s in enumerate(self.services):
            if s.name == name:
                return i
        raise KeyError(f"no service named {name!r}")

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"no label named {label!r}") from None

    def fingerprint(self) -> str:
        """Order-sensitive hash of (name, price) pairs and the label space."""
        payload = json.dumps(
            {
                "services": [[s.name, str(s.cost_per_10k)] for s in self.services],
                "labels": list(self.labels),
            },
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_catalog(path: str) -> ServiceCatalog:
    """Read a catalog config (YAML with services/labels, optional score_map)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise DataFormatError(f"cannot parse catalog config {path}: {exc}") from exc
    if not isinstance(raw, dict) or "services" not in raw or "labels" not in raw:
        raise DataFormatError(f"catalog config {path} needs 'services' and 'labels'")
    services = []
    for entry in raw["services"]:
        if not isinstance(entry, dict) or "name" not in entry or "cost_per_10k" not in entry:
            raise DataFormatError(f"bad service entry in {path}: {entry!r}")
        services.append(Service(str(entry["name"]), _to_decimal(entry["cost_per_10k"])))
    score_map = raw.get("score_map")
    if score_map is not None:
        score_map = {str(k): float(v) for k, v in score_map.items()}
    return ServiceCatalog(tuple(services), tuple(str(x) for x in raw["labels"]), score_map)


def save_catalog(catalog: ServiceCatalog, path: str) -> None:
    doc: dict[str, Any] = {
        "services": [
            {"name": s.name, "cost_per_10k": float(s.cost_per_10k)} for s in catalog.services
        ],
        "labels": list(catalog.labels),
    }
    if catalog.score_map:
        doc["score_map"] = dict(catalog.score_map)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Strategy:
    """A trained two-stage calling strategy.

    base_mixture:     length-K probabilities over base services (<= 2 nonzero).
    thresholds:       K x L quality-score thresholds; escalate when the base's
                      score is <= the threshold for its predicted label.
    threshold_levels: K x L quantile levels behind each threshold; a level of
                      0 means "never escalate" regardless of the threshold.
    addon:            K x L x K add-on mixtures; slice (k, l) is the
                      distribution of the second service when base k
                      escalates on predicted label l (<= 2 nonzero). Mass on
                      the base index means "no second call".
    meta:             budget, grid resolution, predicted performance,
                      catalog fingerprint, and solver provenance.
    """

    base_mixture: np.ndarray
    thresholds: np.ndarray
    threshold_levels: np.ndarray
    addon: np.ndarray
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_mixture", _frozen(self.base_mixture))
        object.__setattr__(self, "thresholds", _frozen(self.thresholds))
        object.__setattr__(self, "threshold_levels", _frozen(self.threshold_levels))
        object.__setattr__(self, "addon", _frozen(self.addon))

    @property
    def n_services(self) -> int:
        return self.base_mixture.shape[0]

    @property
    def n_labels(self) -> int:
        return self.thresholds.shape[1]

    def active_bases(self, atol: float = SIMPLEX_ATOL) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.base_mixture > atol)]


def default_strategy_arrays(n_services: int, n_labels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Canonical blank arrays: zero thresholds/levels, addon slices e_k."""
    base = np.zeros(n_services)
    thresholds = np.zeros((n_services, n_labels))
    levels = np.zeros((n_services, n_labels))
    addon = np.zeros((n_services, n_labels, n_services))
    for k in range(n_services):
        addon[k, :, k] = 1.0
    return base, thresholds, levels, addon


def _nnz(v: np.ndarray, atol: float = SIMPLEX_ATOL) -> int:
    return int(np.sum(np.abs(v) > atol))


def validate_strategy(strategy: Strategy, catalog: ServiceCatalog) -> list[str]:
    """Check every strategy invariant against a catalog.

    Returns a list of human-readable violations (empty when valid). Shape
    mismatches are structural and raise instead of being reported.
    """
    k_n, l_n = catalog.n_services, catalog.n_labels
    if strategy.base_mixture.shape != (k_n,):
        raise StructureError(
            f"base mixture has shape {strategy.base_mixture.shape}, catalog has {k_n} services"
        )
    if strategy.thresholds.shape != (k_n, l_n) or strategy.threshold_levels.shape != (k_n, l_n):
        raise StructureError("threshold matrices do not match catalog dimensions")
    if strategy.addon.shape != (k_n, l_n, k_n):
        raise StructureError("add-on tensor does not match catalog dimensions")

    violations: list[str] = []
    p = strategy.base_mixture
    if np.any(p < -SIMPLEX_ATOL):
        violations.append("base mixture has a negative entry")
    if abs(float(p.sum()) - 1.0) > SIMPLEX_ATOL:
        violations.append(f"base mixture sums to {p.sum()!r}, not 1")
    nnz = _nnz(p)
    if nnz > 2:
        violations.append(f"base mixture has {nnz} nonzeros")

    if np.any(strategy.thresholds < 0.0) or np.any(strategy.thresholds > 1.0):
        violations.append("threshold outside [0, 1]")
    if np.any(strategy.threshold_levels < 0.0) or np.any(strategy.threshold_levels > 1.0):
        violations.append("threshold level outside [0, 1]")

    active = set(strategy.active_bases())
    for k in range(k_n):
        for l in range(l_n):
            sl = strategy.addon[k, l]
            if np.any(sl < -SIMPLEX_ATOL):
                violations.append(f"add-on slice ({k},{l}) has a negative entry")
            if abs(float(sl.sum()) - 1.0) > SIMPLEX_ATOL:
                violations.append(f"add-on slice ({k},{l}) sums to {sl.sum()!r}, not 1")
            if _nnz(sl) > 2:
                violations.append(f"add-on slice ({k},{l}) has {_nnz(sl)} nonzeros")
            if k not in active:
                # Unused rows must carry canonical defaults so that equality
                # and serialization are deterministic.
                if strategy.thresholds[k, l] != 0.0 or strategy.threshold_levels[k, l] != 0.0:
                    violations.append(f"inactive service {k} has non-default thresholds at label {l}")
                if sl[k] != 1.0 or _nnz(sl) != 1:
                    violations.append(f"inactive service {k} has non-default add-on slice at label {l}")
            if strategy.threshold_levels[k, l] == 0.0 and strategy.thresholds[k, l] != 0.0:
                violations.append(
                    f"slice ({k},{l}) has level 0 but a nonzero threshold"
                )
    return violations


def serialize_strategy(strategy: Strategy) -> str:
    """Serialize to a JSON document. Round-trips bit-exactly on all floats."""
    p = strategy.base_mixture
    addon_triples = []
    for k in range(strategy.n_services):
        for l in range(strategy.n_labels):
            sl = strategy.addon[k, l]
            default = np.zeros_like(sl)
            default[k] = 1.0
            if not np.array_equal(sl, default):
                for j in np.flatnonzero(sl != 0.0):
                    addon_triples.append([int(k), int(l), int(j), float(sl[j])])
    doc = {
        "version": STRATEGY_FORMAT_VERSION,
        "catalog_fingerprint": strategy.meta.get("catalog_fingerprint", ""),
        "base_mixture": [[int(i), float(p[i])] for i in np.flatnonzero(p != 0.0)],
        "thresholds": [[float(x) for x in row] for row in strategy.thresholds],
        "threshold_levels": [[float(x) for x in row] for row in strategy.threshold_levels],
        "addon": addon_triples,
        "meta": {k: v for k, v in strategy.meta.items() if k != "catalog_fingerprint"},
    }
    return json.dumps(doc, indent=1)


def deserialize_strategy(text: str, catalog: ServiceCatalog) -> Strategy:
    """Parse a strategy document and bind it to a catalog.

    Raises FormatVersionError / FingerprintMismatchError / DataFormatError
    for the three distinct failure modes.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"strategy document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataFormatError("strategy document must be a JSON object")
    version = doc.get("version")
    if version != STRATEGY_FORMAT_VERSION:
        raise FormatVersionError(
            f"unsupported strategy format version {version!r} (expected {STRATEGY_FORMAT_VERSION})"
        )
    fp = doc.get("catalog_fingerprint")
    if fp != catalog.fingerprint():
        raise FingerprintMismatchError(
            "strategy was trained against a different catalog "
            f"(document {str(fp)[:12]}..., catalog {catalog.fingerprint()[:12]}...)"
        )
    required = ("base_mixture", "thresholds", "threshold_levels", "addon", "meta")
    for key in required:
        if key not in doc:
            raise DataFormatError(f"strategy document is missing field {key!r}")

    k_n, l_n = catalog.n_services, catalog.n_labels
    base, thresholds, levels, addon = default_strategy_arrays(k_n, l_n)
    try:
        for idx, weight in doc["base_mixture"]:
            base[int(idx)] = float(weight)
        th = np.asarray(doc["thresholds"], dtype=float)
        lv = np.asarray(doc["threshold_levels"], dtype=float)
        if th.shape != (k_n, l_n) or lv.shape != (k_n, l_n):
            raise DataFormatError(
                f"threshold matrices have shape {th.shape}, catalog needs {(k_n, l_n)}"
            )
        thresholds[:, :] = th
        levels[:, :] = lv
        touched = set()
        for k, l, j, w in doc["addon"]:
            k, l, j = int(k), int(l), int(j)
            if (k, l) not in touched:
                addon[k, l, :] = 0.0
                touched.add((k, l))
            addon[k, l, j] = float(w)
    except (TypeError, ValueError, IndexError) as exc:
        raise DataFormatError(f"strategy document has malformed content: {exc}") from exc

    # Every escalating (k, l) cell needs a full add-on distribution; a
    # missing or truncated slice cannot be told apart from a bad write, so
    # reject the document outright.
    for k in range(k_n):
        for l in range(l_n):
            if abs(float(addon[k, l].sum()) - 1.0) > SIMPLEX_ATOL:
                raise DataFormatError(
                    f"add-on slice ({k},{l}) incomplete: weights sum to {addon[k, l].sum()!r}"
                )

    meta = dict(doc["meta"])
    meta["catalog_fingerprint"] = fp
    return Strategy(base, thresholds, levels, addon, meta)
