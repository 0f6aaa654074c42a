"""Interaction-log ingestion, k-core filtering, and CTR sample construction.

Input files:
  * interactions: tab-separated with a header row; the column mapping and the
    valid rating range come from :class:`InteractionSchema`.
  * item metadata: JSON lines, one object per item with at least ``id`` and
    ``title`` keys; remaining keys are treated as free-form attributes.
  * user metadata (optional): JSON lines with ``id`` plus profile attributes.

All functions here are pure over immutable inputs and safe to call from
multiple threads.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DuplicateInteractionError, ParseError


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float
    timestamp: int


@dataclass(frozen=True)
class InteractionSchema:
    """Column names in the TSV header plus the dataset's native rating range."""

    user_col: str = "user_id"
    item_col: str = "item_id"
    rating_col: str = "rating"
    time_col: str = "timestamp"
    rating_min: float = 1.0
    rating_max: float = 5.0


class InteractionLog:
    """An ordered interaction set with dense user/item indices.

    Dense ids are assigned in first-appearance order over the interaction
    sequence, which makes them deterministic for a given input file.  Per-user
    histories are pre-sorted by (timestamp, input order, item_id) so equal
    timestamps resolve by position in the file.
    """

    def __init__(self, interactions: Sequence[Interaction]):
        self.interactions: tuple[Interaction, ...] = tuple(interactions)
        self.user_index: dict[str, int] = {}
        self.item_index: dict[str, int] = {}
        for inter in self.interactions:
            if inter.user_id not in self.user_index:
                self.user_index[inter.user_id] = len(self.user_index)
            if inter.item_id not in self.item_index:
                self.item_index[inter.item_id] = len(self.item_index)
        per_user: dict[str, list[int]] = {u: [] for u in self.user_index}
        for row, inter in enumerate(self.interactions):
            per_user[inter.user_id].append(row)
        self._user_rows = {
            u: tuple(sorted(rows, key=lambda r: (self.interactions[r].timestamp, r,
                                                 self.interactions[r].item_id)))
            for u, rows in per_user.items()
        }

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    @property
    def n_interactions(self) -> int:
        return len(self.interactions)

    def user_history(self, user_id: str) -> tuple[Interaction, ...]:
        """All interactions of a user in nondecreasing timestamp order."""
        return tuple(self.interactions[r] for r in self._user_rows[user_id])

    def users(self) -> Iterable[str]:
        return self.user_index.keys()

    def item_ids_dense_order(self) -> list[str]:
        ordered = sorted(self.item_index, key=self.item_index.get)
        return ordered


@dataclass(frozen=True)
class CtrSample:
    """One CTR prediction instance: history strictly precedes the target."""

    user_id: str
    profile_fields: Mapping[str, str]
    history: tuple[tuple[str, float, int], ...]  # (item_id, rating, timestamp)
    target_item_id: str
    target_timestamp: int
    label: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "user_id": self.user_id,
                "profile_fields": dict(self.profile_fields),
                "history": [list(h) for h in self.history],
                "target_item_id": self.target_item_id,
                "target_timestamp": self.target_timestamp,
                "label": self.label,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "CtrSample":
        obj = json.loads(line)
        return CtrSample(
            user_id=obj["user_id"],
            profile_fields=obj["profile_fields"],
            history=tuple((h[0], float(h[1]), int(h[2])) for h in obj["history"]),
            target_item_id=obj["target_item_id"],
            target_timestamp=int(obj["target_timestamp"]),
            label=int(obj["label"]),
        )


def load_interactions(path: str | Path, schema: InteractionSchema) -> InteractionLog:
    """Parse a TSV interaction file into an :class:`InteractionLog`.

    Raises :class:`ParseError` naming the 1-based line number on any malformed
    row, and :class:`DuplicateInteractionError` when the same
    (user, item, timestamp) triple occurs twice.
    """
    path = Path(path)
    interactions: list[Interaction] = []
    seen: set[tuple[str, str, int]] = set()
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            return InteractionLog([])
        header = header_line.rstrip("\n").split("\t")
        try:
            cols = {
                "user": header.index(schema.user_col),
                "item": header.index(schema.item_col),
                "rating": header.index(schema.rating_col),
                "time": header.index(schema.time_col),
            }
        except ValueError as exc:
            raise ParseError(f"{path}: header missing required column: {exc}") from None
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} columns, got {len(parts)}")
            user_id = parts[cols["user"]]
            item_id = parts[cols["item"]]
            if not user_id or not item_id:
                raise ParseError(f"{path}:{lineno}: empty user or item id")
            try:
                rating = float(parts[cols["rating"]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric rating {parts[cols['rating']]!r}") from None
            try:
                timestamp = int(parts[cols["time"]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric timestamp {parts[cols['time']]!r}") from None
            if timestamp < 0:
                raise ParseError(f"{path}:{lineno}: negative timestamp {timestamp}")
            if not (schema.rating_min <= rating <= schema.rating_max):
                raise ParseError(
                    f"{path}:{lineno}: rating {rating} outside declared range "
                    f"[{schema.rating_min}, {schema.rating_max}]"
                )
            triple = (user_id, item_id, timestamp)
            if triple in seen:
                raise DuplicateInteractionError(f"{path}:{lineno}: duplicate triple {triple}")
            seen.add(triple)
            interactions.append(Interaction(user_id, item_id, rating, timestamp))
    return InteractionLog(interactions)


def load_item_metadata(path: str | Path) -> dict[str, dict]:
    """Load the JSON-lines item-metadata file as ``{item_id: record}``."""
    records: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "id" not in obj:
                raise ParseError(f"{path}:{lineno}: item record missing 'id'")
            records[str(obj["id"])] = obj
    return records


def load_user_metadata(path: str | Path) -> dict[str, dict]:
    """Same layout as item metadata, keyed by user id."""
    return load_item_metadata(path)


def k_core_filter(log: InteractionLog, k: int) -> InteractionLog:
    """Iteratively prune users/items with fewer than k interactions.

    Runs to a fixed point, so the result is the maximal subgraph in which
    every surviving user and item has at least k interactions.  Dense ids are
    re-compacted by the returned log.  May return an empty log.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    rows = list(log.interactions)
    while True:
        user_counts = Counter(i.user_id for i in rows)
        item_counts = Counter(i.item_id for i in rows)
        kept = [i for i in rows if user_counts[i.user_id] >= k and item_counts[i.item_id] >= k]
        if len(kept) == len(rows):
            return InteractionLog(kept)
        rows = kept


def build_samples(
    log: InteractionLog,
    label_threshold: float,
    min_history: int,
    profiles: Mapping[str, Mapping[str, str]] | None = None,
) -> list[CtrSample]:
    """One sample per eligible user, targeting that user's latest interaction.

    History is every interaction strictly before the target's timestamp, in
    chronological order; the label is 1 iff the target rating exceeds
    ``label_threshold``.  Users with fewer than ``min_history`` strictly
    earlier interactions are excluded.  Profile fields, when provided, are
    looked up per user and passed through untouched.
    """
    if min_history < 1:
        raise ContractError(f"min_history must be >= 1, got {min_history}")
    profiles = profiles or {}
    samples: list[CtrSample] = []
    for user_id in log.users():
        history = log.user_history(user_id)
        if len(history) < min_history + 1:
            continue
        target = history[-1]
        earlier = [h for h in history[:-1] if h.timestamp < target.timestamp]
        if len(earlier) < min_history:
            continue
        samples.append(
            CtrSample(
                user_id=user_id,
                profile_fields=dict(profiles.get(user_id, {})),
                history=tuple((h.item_id, h.rating, h.timestamp) for h in earlier),
                target_item_id=target.item_id,
                target_timestamp=target.timestamp,
                label=1 if target.rating > label_threshold else 0,
            )
        )
    return samples


@dataclass(frozen=True)
class SplitPolicy:
    ratio: float = 0.8
    seed: int = 0


def split_samples(
    samples: Sequence[CtrSample], policy: SplitPolicy
) -> tuple[list[CtrSample], list[CtrSample]]:
    """Deterministic disjoint train/test partition by shuffled assignment."""
    if not (0.0 < policy.ratio < 1.0):
        raise ContractError(f"split ratio must be in (0, 1), got {policy.ratio}")
    rng = np.random.default_rng(policy.seed)
    order = rng.permutation(len(samples))
    n_train = int(round(len(samples) * policy.ratio))
    train_idx = set(order[:n_train].tolist())
    train = [s for i, s in enumerate(samples) if i in train_idx]
    test = [s for i, s in enumerate(samples) if i not in train_idx]
    return train, test


def interaction_stats(log: InteractionLog) -> dict[str, int]:
    return {
        "n_users": log.n_users,
        "n_items": log.n_items,
        "n_interactions": log.n_interactions,
    }
