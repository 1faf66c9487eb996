"""Event logs, time-based splits, and sparse preference-tensor construction.

The raw input is a log of timestamped (user, item[, category]) interactions.
Training consumes it as a sparse D-dimensional binary tensor: a cell is 1 if
the corresponding (user, item, context...) combination was observed, and each
observed cell carries a confidence weight strictly larger than the baseline
weight ``w0`` assigned to every unobserved cell.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

_AUTO_COLUMNS = ("user", "item", "timestamp", "category")


class ParseError(ValueError):
    """Malformed event-file input. ``line_no`` is 1-based."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class Vocabulary:
    """Dense 0-based indices for raw keys, assigned in first-seen order."""

    def __init__(self) -> None:
        self._index: dict[str, int] = {}
        self._keys: list[str] = []

    def intern(self, key: str) -> int:
        """Return the index for ``key``, assigning the next one if unseen."""
        idx = self._index.get(key)
        if idx is None:
            idx = len(self._keys)
            self._index[key] = idx
            self._keys.append(key)
        return idx

    def get(self, key: str) -> int | None:
        return self._index.get(key)

    def key_of(self, index: int) -> str:
        return self._keys[index]

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._keys)

    def __iter__(self) -> Iterator[str]:
        return iter(self._keys)


@dataclass(frozen=True)
class Event:
    """One interaction, with vocabulary indices instead of raw keys."""

    user: int
    item: int
    timestamp: int
    category: int | None = None


@dataclass
class EventLog:
    """Events sorted by timestamp plus the shared vocabularies.

    Splits of the same log share the vocabulary objects, so indices remain
    consistent across train and test.
    """

    events: list[Event]
    users: Vocabulary
    items: Vocabulary
    categories: Vocabulary

    def __len__(self) -> int:
        return len(self.events)

    @property
    def has_categories(self) -> bool:
        return len(self.categories) > 0


def parse_event_log(
    source: str | bytes | io.IOBase,
    columns: Sequence[str] | None = None,
    vocab_from: EventLog | None = None,
) -> EventLog:
    """Parse a UTF-8 TSV event stream into an :class:`EventLog`.

    Each line holds one event: tab-separated fields in ``columns`` order
    (default: user, item, timestamp and, if a fourth field is present,
    category). Lines starting with ``#`` and blank lines are skipped.
    Timestamps are non-negative integer seconds. Events come out sorted by
    timestamp (stable, so input order breaks ties).

    When ``vocab_from`` is given its vocabularies are reused (and extended
    in place), which keeps indices consistent between separately parsed
    train and test files.

    Raises:
        ParseError: on a malformed line, with its 1-based line number.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    if vocab_from is not None:
        users, items, categories = (
            vocab_from.users,
            vocab_from.items,
            vocab_from.categories,
        )
    else:
        users, items, categories = Vocabulary(), Vocabulary(), Vocabulary()

    if columns is not None:
        columns = tuple(columns)
        for name in columns:
            if name not in _AUTO_COLUMNS:
                raise ValueError(f"unknown column name: {name!r}")
        for required in ("user", "item", "timestamp"):
            if required not in columns:
                raise ValueError(f"column layout is missing {required!r}")

    events: list[Event] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        layout = columns
        if layout is None:
            if len(fields) == 3:
                layout = _AUTO_COLUMNS[:3]
            elif len(fields) == 4:
                layout = _AUTO_COLUMNS
            else:
                raise ParseError(line_no, f"expected 3 or 4 fields, got {len(fields)}")
        if len(fields) != len(layout):
            raise ParseError(
                line_no, f"expected {len(layout)} fields, got {len(fields)}"
            )
        record = dict(zip(layout, fields))
        try:
            timestamp = int(record["timestamp"])
        except ValueError:
            raise ParseError(
                line_no, f"timestamp is not an integer: {record['timestamp']!r}"
            ) from None
        if timestamp < 0:
            raise ParseError(line_no, f"negative timestamp: {timestamp}")
        category = None
        if "category" in record:
            category = categories.intern(record["category"])
        events.append(
            Event(
                user=users.intern(record["user"]),
                item=items.intern(record["item"]),
                timestamp=timestamp,
                category=category,
            )
        )

    events.sort(key=lambda e: e.timestamp)
    return EventLog(events=events, users=users, items=items, categories=categories)


def time_split(log: EventLog, split_time: int) -> tuple[EventLog, EventLog]:
    """Split into (train, test) at ``split_time``.

    Train gets events strictly before the split, test gets the rest. The
    vocabulary objects are shared, and test events whose user or item never
    occurs in train are kept (the evaluator decides how to count them).
    """
    train = [e for e in log.events if e.timestamp < split_time]
    test = [e for e in log.events if e.timestamp >= split_time]
    return (
        EventLog(train, log.users, log.items, log.categories),
        EventLog(test, log.users, log.items, log.categories),
    )


class SparseTensor:
    """Nonzero cells of a D-dimensional binary tensor with per-cell weights.

    Only observed cells are stored; every other cell implicitly holds value 0
    with the baseline weight ``w0``. Stored cells have value 1 and a weight
    strictly greater than ``w0``. Instances are immutable after construction
    and safe to read concurrently.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        indices: np.ndarray,
        weights: np.ndarray,
        w0: float,
    ):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2:
            raise ValueError("tensor needs at least two dimensions")
        if any(s < 1 for s in sizes):
            raise ValueError("all dimension sizes must be >= 1")
        indices = np.ascontiguousarray(np.asarray(indices, dtype=np.int64))
        weights = np.asarray(weights, dtype=np.float64)
        if indices.ndim != 2 or indices.shape[1] != len(sizes):
            raise ValueError("indices must have shape (n_cells, ndim)")
        if weights.shape != (indices.shape[0],):
            raise ValueError("weights must have one entry per cell")
        if w0 <= 0:
            raise ValueError("baseline weight w0 must be positive")
        if indices.size:
            if indices.min() < 0 or (indices >= np.asarray(sizes)).any():
                raise ValueError("cell index out of range")
            if not (weights > w0).all():
                raise ValueError("every stored cell weight must exceed w0")

        # Canonical lexicographic cell order makes construction reproducible
        # regardless of input order.
        if indices.shape[0]:
            order = np.lexsort(indices.T[::-1])
            indices = indices[order]
            weights = weights[order]
            if (np.diff(indices, axis=0) == 0).all(axis=1).any():
                raise ValueError("duplicate cell indices")

        self._sizes = sizes
        self._indices = indices
        self._weights = weights
        self._w0 = float(w0)
        self._lookup = {tuple(row): i for i, row in enumerate(indices.tolist())}
        self._groups = [self._group_dim(d) for d in range(len(sizes))]

    def _group_dim(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        keys = self._indices[:, dim] if self._indices.size else np.empty(0, np.int64)
        order = np.argsort(keys, kind="stable")
        counts = np.bincount(keys, minlength=self._sizes[dim])
        offsets = np.concatenate(([0], np.cumsum(counts)))
        return order.astype(np.int64), offsets.astype(np.int64)

    @classmethod
    def from_cells(
        cls, sizes: Sequence[int], cells: Mapping[tuple, float], w0: float
    ) -> "SparseTensor":
        n = len(cells)
        indices = np.empty((n, len(tuple(sizes))), dtype=np.int64)
        weights = np.empty(n, dtype=np.float64)
        for row, (idx, weight) in enumerate(cells.items()):
            indices[row] = idx
            weights[row] = weight
        return cls(sizes, indices, weights, w0)

    @property
    def ndim(self) -> int:
        return len(self._sizes)

    @property
    def sizes(self) -> tuple[int, ...]:
        return self._sizes

    @property
    def w0(self) -> float:
        return self._w0

    @property
    def n_positive(self) -> int:
        return self._indices.shape[0]

    @property
    def indices(self) -> np.ndarray:
        return self._indices

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    def weight_at(self, idx: Sequence[int]) -> float:
        """Weight of a cell: its stored weight if observed, else ``w0``."""
        row = self._lookup.get(tuple(int(i) for i in idx))
        return self._w0 if row is None else float(self._weights[row])

    def value_at(self, idx: Sequence[int]) -> int:
        """Binary tensor value at ``idx``."""
        return int(tuple(int(i) for i in idx) in self._lookup)

    def rows_for(self, dim: int, entity: int) -> np.ndarray:
        """Row ids of all stored cells whose ``dim`` index equals ``entity``."""
        order, offsets = self._groups[dim]
        return order[offsets[entity] : offsets[entity + 1]]

    def cells(self) -> Iterator[tuple[tuple[int, ...], float]]:
        for row in range(self.n_positive):
            yield tuple(self._indices[row].tolist()), float(self._weights[row])


def build_tensor(
    log: EventLog,
    assigner=None,
    w0: float = 1.0,
    wt: float = 100.0,
    count_scaling: bool = False,
    alpha: float = 99.0,
) -> SparseTensor:
    """Materialize the preference tensor for ``log``.

    Without an assigner (or with a no-op one) the tensor is user x item.
    Otherwise each event lands in one cell per context state the assigner
    returns, at ``(user, item, state)``. Repeated identical cells collapse to
    one stored cell. The default weight for an observed cell is the constant
    ``wt``; with ``count_scaling`` the weight grows linearly with the
    occurrence count instead: ``w0 + alpha * count``. Assigners that return
    several states per event attach a multiplier per state, which scales the
    cell's weight above the baseline: ``w0 + multiplier * (weight - w0)``.

    Raises:
        ValueError: on invalid weight parameters.
        IndexError: if the assigner emits a state >= its declared state count.
    """
    if w0 <= 0:
        raise ValueError("w0 must be positive")
    if wt <= w0:
        raise ValueError("wt must be strictly greater than w0")
    if count_scaling and alpha <= 0:
        raise ValueError("alpha must be positive when count scaling is on")

    n_states = 0
    states = None
    if assigner is not None:
        n_states = assigner.n_states(log)
        if n_states:
            states = assigner.assign_train(log)

    # Accumulate one multiplier per distinct cell: the sum of per-occurrence
    # multipliers under count scaling, otherwise the maximum (so a repeated
    # full-weight event keeps the constant weight wt).
    acc: dict[tuple, float] = {}
    for pos, event in enumerate(log.events):
        if states is None:
            cell_states = ((None, 1.0),)
        else:
            cell_states = states[pos]
        for state, multiplier in cell_states:
            if state is None:
                key = (event.user, event.item)
            else:
                if state >= n_states:
                    raise IndexError(
                        f"context state {state} >= declared state count {n_states}"
                    )
                key = (event.user, event.item, state)
            if count_scaling:
                acc[key] = acc.get(key, 0.0) + multiplier
            else:
                acc[key] = max(acc.get(key, 0.0), multiplier)

    if count_scaling:
        cells = {key: w0 + alpha * count for key, count in acc.items()}
    else:
        cells = {key: w0 + (wt - w0) * mult for key, mult in acc.items()}

    sizes: tuple[int, ...]
    if states is None:
        sizes = (max(len(log.users), 1), max(len(log.items), 1))
    else:
        sizes = (max(len(log.users), 1), max(len(log.items), 1), n_states)
    return SparseTensor.from_cells(sizes, cells, w0)
