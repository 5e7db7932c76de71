"""Annotated replay corpora: ingestion, validation, splitting, quantiles.

A corpus row records, for one input, the true label plus every catalog
service's predicted label and quality score. Strategies are evaluated by
replaying these pre-recorded answers instead of calling paid endpoints.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .catalog import ServiceCatalog
from .errors import DataFormatError, FingerprintMismatchError, ValidationError

# Returned by empirical_quantile at level 0. It sits below every
# representable score, so a threshold at this value never escalates under
# the "score <= threshold" rule.
NEVER_ESCALATE_SENTINEL = -1.0


@dataclass(frozen=True)
class AnnotatedSample:
    """One input's true label plus each service's (prediction, score)."""

    sample_id: str
    true_label: str
    predicted: tuple[str, ...]
    scores: tuple[float, ...]


@dataclass(frozen=True)
class AnnotatedDataset:
    samples: tuple[AnnotatedSample, ...]
    catalog_fingerprint: str

    def __post_init__(self) -> None:
        if len(self.samples) < 1:
            raise ValidationError("dataset must contain at least one sample")
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("sample ids must be unique")

    def __len__(self) -> int:
        return len(self.samples)

    def sample_ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]


def check_fingerprint(dataset: AnnotatedDataset, catalog: ServiceCatalog) -> None:
    if dataset.catalog_fingerprint != catalog.fingerprint():
        raise FingerprintMismatchError(
            "dataset was ingested against a different catalog"
        )


def to_arrays(dataset: AnnotatedDataset, catalog: ServiceCatalog) -> dict[str, np.ndarray]:
    """Index-encode a dataset for vectorized estimation and replay.

    Returns true_idx (N,), pred_idx (K, N), scores (K, N), correct (K, N).
    """
    check_fingerprint(dataset, catalog)
    label_pos = {lab: i for i, lab in enumerate(catalog.labels)}
    n = len(dataset)
    k_n = catalog.n_services
    true_idx = np.fromiter((label_pos[s.true_label] for s in dataset.samples), dtype=np.int64, count=n)
    pred_idx = np.empty((k_n, n), dtype=np.int64)
    scores = np.empty((k_n, n), dtype=float)
    for i, s in enumerate(dataset.samples):
        for k in range(k_n):
            pred_idx[k, i] = label_pos[s.predicted[k]]
            scores[k, i] = s.scores[k]
    correct = pred_idx == true_idx[np.newaxis, :]
    return {"true_idx": true_idx, "pred_idx": pred_idx, "scores": scores, "correct": correct}


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance, used to remap off-vocabulary predictions."""
    if a == b:
        return 0
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nearest_label(raw: str, labels: Sequence[str]) -> str:
    """Closest label by edit distance; ties go to the earlier label."""
    best = min(range(len(labels)), key=lambda i: (edit_distance(raw, labels[i]), i))
    return labels[best]


def _parse_score(cell: str, catalog: ServiceCatalog) -> float:
    if catalog.score_map is not None and cell in catalog.score_map:
        return float(catalog.score_map[cell])
    try:
        return float(cell)
    except ValueError:
        raise DataFormatError(f"score {cell!r} is neither numeric nor in the score map") from None


def expected_header(catalog: ServiceCatalog) -> list[str]:
    header = ["sample_id", "true_label"]
    for s in catalog.services:
        header += [f"pred_{s.name}", f"score_{s.name}"]
    return header


def load_dataset(path: str, catalog: ServiceCatalog, strict_labels: bool = False) -> AnnotatedDataset:
    """Read a corpus CSV.

    Column convention: sample_id, true_label, then pred_<name>, score_<name>
    per service in catalog order. Predicted labels outside the label space
    are remapped to the nearest label by edit distance, unless
    strict_labels is set, in which case they are rejected.
    """
    want = expected_header(catalog)
    label_set = set(catalog.labels)
    samples: list[AnnotatedSample] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path} is empty") from None
        if header != want:
            missing = [c for c in want if c not in header]
            if missing:
                raise DataFormatError(f"{path} is missing columns {missing}")
            raise DataFormatError(
                f"{path} columns are not in catalog order: got {header}, want {want}"
            )
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(want):
                raise DataFormatError(f"{path}:{row_no}: expected {len(want)} cells, got {len(row)}")
            sample_id, true_label = row[0], row[1]
            if true_label not in label_set:
                raise DataFormatError(f"{path}:{row_no}: unknown true label {true_label!r}")
            preds: list[str] = []
            scs: list[float] = []
            for k in range(catalog.n_services):
                raw_pred = row[2 + 2 * k]
                raw_score = row[3 + 2 * k]
                if raw_pred not in label_set:
                    if strict_labels:
                        raise DataFormatError(
                            f"{path}:{row_no}: predicted label {raw_pred!r} not in label space"
                        )
                    raw_pred = nearest_label(raw_pred, catalog.labels)
                score = _parse_score(raw_score, catalog)
                if not 0.0 <= score <= 1.0:
                    raise DataFormatError(f"{path}:{row_no}: score {score} outside [0, 1]")
                preds.append(raw_pred)
                scs.append(score)
            samples.append(AnnotatedSample(sample_id, true_label, tuple(preds), tuple(scs)))
    if not samples:
        raise DataFormatError(f"{path} has a header but no rows")
    return AnnotatedDataset(tuple(samples), catalog.fingerprint())


def save_dataset(dataset: AnnotatedDataset, catalog: ServiceCatalog, path: str) -> None:
    check_fingerprint(dataset, catalog)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(expected_header(catalog))
        for s in dataset.samples:
            row: list[str] = [s.sample_id, s.true_label]
            for pred, score in zip(s.predicted, s.scores):
                row += [pred, repr(score)]
            writer.writerow(row)


def split(dataset: AnnotatedDataset, train_fraction: float, seed: int) -> tuple[AnnotatedDataset, AnnotatedDataset]:
    """Deterministic seeded partition into (train, test).

    Sizes are ceil(f*N) and N - ceil(f*N); row order inside each part
    follows the original corpus order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    if n < 2:
        raise ValidationError("cannot split a dataset with fewer than 2 samples")
    n_train = math.ceil(train_fraction * n)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    train = AnnotatedDataset(tuple(dataset.samples[i] for i in train_idx), dataset.catalog_fingerprint)
    test = AnnotatedDataset(tuple(dataset.samples[i] for i in test_idx), dataset.catalog_fingerprint)
    return train, test


def empirical_quantile(values: Iterable[float], level: float) -> float:
    """Nearest-rank quantile: the ceil(level * n)-th smallest value.

    Level 0 maps to the never-escalate sentinel (below every valid score)
    rather than the minimum, so a level-0 threshold can never fire.
    """
    if not 0.0 <= level <= 1.0:
        raise ValidationError(f"quantile level must be in [0, 1], got {level}")
    data = np.sort(np.asarray(list(values), dtype=float))
    if data.size == 0:
        raise ValidationError("cannot take a quantile of an empty sequence")
    if level <= 0.0:
        return NEVER_ESCALATE_SENTINEL
    # The 1e-9 slack keeps ranks stable when level*n sits on an integer up
    # to float rounding (e.g. after rescaling costs and budgets).
    rank = max(1, math.ceil(level * data.size - 1e-9))
    return float(data[min(rank, data.size) - 1])
