"""Co-occurrence prior P(interaction | action_1, action_2)."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ._records import FORMAT_VERSION, FormatError

DEFAULT_ACTIONS = ("grazing", "lying", "standing", "riding")
DEFAULT_INTERACTIONS = ("mounting", "fighting", "smelling")


class CatalogError(KeyError):
    pass


class CatalogMismatchError(ValueError):
    pass


class UnseenPairWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ClassCatalog:
    individual_actions: tuple[str, ...] = DEFAULT_ACTIONS
    interactions: tuple[str, ...] = DEFAULT_INTERACTIONS

    def __post_init__(self):
        object.__setattr__(self, "individual_actions", tuple(self.individual_actions))
        object.__setattr__(self, "interactions", tuple(self.interactions))
        for name, labels in (("individual_actions", self.individual_actions),
                             ("interactions", self.interactions)):
            if len(labels) < 1:
                raise ValueError(f"{name} must not be empty")
            if len(set(labels)) != len(labels):
                raise ValueError(f"{name} contains duplicate labels")

    @property
    def n_actions(self) -> int:
        return len(self.individual_actions)

    @property
    def n_interactions(self) -> int:
        return len(self.interactions)

    def action_index(self, label: str) -> int:
        try:
            return self.individual_actions.index(label)
        except ValueError:
            raise CatalogError(f"unknown individual action {label!r}") from None

    def interaction_index(self, label: str) -> int:
        try:
            return self.interactions.index(label)
        except ValueError:
            raise CatalogError(f"unknown interaction {label!r}") from None

    def to_dict(self) -> dict:
        return {"individual_actions": list(self.individual_actions),
                "interactions": list(self.interactions)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        return cls(tuple(d["individual_actions"]), tuple(d["interactions"]))


@dataclass(frozen=True, eq=False)
class SemanticPriorTable:
    counts: np.ndarray
    smoothing_alpha: float = 1.0
    catalog: ClassCatalog = field(default_factory=ClassCatalog)

    def __post_init__(self):
        a, n = self.catalog.n_actions, self.catalog.n_interactions
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (a, a, n):
            raise ValueError(f"counts shape {counts.shape} does not match catalog ({a}, {a}, {n})")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        if not np.array_equal(counts, counts.transpose(1, 0, 2)):
            raise ValueError("counts must be symmetric in the two action indices")
        if self.smoothing_alpha < 0:
            raise ValueError("smoothing_alpha must be >= 0")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    def __eq__(self, other):
        if not isinstance(other, SemanticPriorTable):
            return NotImplemented
        return (self.catalog == other.catalog and self.smoothing_alpha == other.smoothing_alpha
                and np.array_equal(self.counts, other.counts))

    def probabilities(self) -> np.ndarray:
        """Full (A, A, N) table of smoothed conditionals; unseen unsmoothed pairs are uniform."""
        n = self.catalog.n_interactions
        num = self.counts + self.smoothing_alpha
        den = self.counts.sum(axis=2, keepdims=True) + self.smoothing_alpha * n
        with np.errstate(invalid="ignore", divide="ignore"):
            probs = num / den
        probs[np.broadcast_to(den == 0, probs.shape)] = 1.0 / n
        return probs


def fit_prior(samples: Iterable[tuple[str, str, str]], alpha: float = 1.0,
              catalog: ClassCatalog | None = None) -> SemanticPriorTable:
    """Count (action_a, action_b, interaction) triples, symmetrised over the action pair."""
    catalog = catalog or ClassCatalog()
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    counts = np.zeros((catalog.n_actions, catalog.n_actions, catalog.n_interactions), dtype=np.int64)
    for a, b, k in samples:
        ia, ib, ik = catalog.action_index(a), catalog.action_index(b), catalog.interaction_index(k)
        counts[ia, ib, ik] += 1
        counts[ib, ia, ik] += 1
    return SemanticPriorTable(counts, float(alpha), catalog)


def lookup(table: SemanticPriorTable, a1: str, a2: str) -> np.ndarray:
    """Distribution over interactions given the two individual actions."""
    i, j = table.catalog.action_index(a1), table.catalog.action_index(a2)
    return lookup_index(table, i, j)


def lookup_index(table: SemanticPriorTable, i: int, j: int) -> np.ndarray:
    row = table.counts[i, j].astype(np.float64)
    n = table.catalog.n_interactions
    den = row.sum() + table.smoothing_alpha * n
    if den == 0:
        warnings.warn(f"no observations for action pair ({i}, {j}) and alpha=0; using uniform prior",
                      UnseenPairWarning, stacklevel=2)
        return np.full(n, 1.0 / n)
    return (row + table.smoothing_alpha) / den


def save_prior(table: SemanticPriorTable, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "catalog": table.catalog.to_dict(),
        "alpha": table.smoothing_alpha,
        "shape": list(table.counts.shape),
        "counts": table.counts.ravel(order="C").tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_prior(path, expected_catalog: ClassCatalog | None = None) -> SemanticPriorTable:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt prior file ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {doc.get('format_version') if isinstance(doc, dict) else None!r}")
    try:
        catalog = ClassCatalog.from_dict(doc["catalog"])
        counts = np.asarray(doc["counts"], dtype=np.int64).reshape(doc["shape"], order="C")
        table = SemanticPriorTable(counts, float(doc["alpha"]), catalog)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt prior file ({exc})") from None
    if expected_catalog is not None and catalog != expected_catalog:
        raise CatalogMismatchError(f"{path}: catalog {catalog} does not match expected {expected_catalog}")
    return table
