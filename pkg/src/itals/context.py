"""Context assigners: map events to context states for the tensor's third axis.

Two concrete kinds are provided. Seasonal context bins each event's position
inside a repeating period (a day, a week) into a time band. Sequential context
uses the user's previous item, or that item's category, so the factorization
can learn how repetitive consumption of an item type is. Assigners are
immutable and safe to share between threads.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

from .data import EventLog

# Weighted (state, multiplier) pairs attached to one event or query.
WeightedStates = list[tuple[int, float]]


def blend_weights(states: WeightedStates) -> WeightedStates:
    """Normalize state multipliers to sum to one, for score-time blending.

    Raises:
        ValueError: if ``states`` is empty.
    """
    if not states:
        raise ValueError("need at least one context state to blend")
    total = sum(weight for _, weight in states)
    return [(state, weight / total) for state, weight in states]


class ContextAssigner:
    """Interface shared by all context kinds."""

    kind = "none"

    def n_states(self, log: EventLog | None = None) -> int:
        """Number of context states; 0 means no context dimension."""
        return 0

    def assign_train(self, log: EventLog) -> list[WeightedStates]:
        """Per-event weighted states, aligned with ``log.events``."""
        raise NotImplementedError

    def query_states(
        self,
        timestamp: int | None = None,
        recent: Sequence[int] | None = None,
    ) -> WeightedStates:
        """States for a recommendation request.

        Seasonal assigners read ``timestamp``; sequential ones read
        ``recent``, the user's preceding items or categories ordered most
        recent first.
        """
        raise NotImplementedError


class NoContext(ContextAssigner):
    """Plain user x item factorization, no context dimension."""

    def assign_train(self, log: EventLog) -> list[WeightedStates]:
        return [[] for _ in log.events]

    def query_states(self, timestamp=None, recent=None) -> WeightedStates:
        return []


@dataclass(frozen=True)
class SeasonContext(ContextAssigner):
    """Time bands inside a repeating season.

    With uniform bands, ``season_length`` must be divisible by
    ``band_length`` and an event at time t falls in band
    ``(t mod season_length) // band_length``. Alternatively ``boundaries``
    gives explicit interior cut points (offsets within the season, sorted
    ascending), producing ``len(boundaries) + 1`` bands.
    """

    season_length: int
    band_length: int | None = None
    boundaries: tuple[int, ...] | None = None
    kind = "season"

    def __post_init__(self):
        if self.season_length <= 0:
            raise ValueError("season_length must be positive")
        if (self.band_length is None) == (self.boundaries is None):
            raise ValueError("give exactly one of band_length or boundaries")
        if self.band_length is not None:
            if self.band_length <= 0:
                raise ValueError("band_length must be positive")
            if self.season_length % self.band_length != 0:
                raise ValueError("season_length must be divisible by band_length")
        else:
            bounds = tuple(self.boundaries)
            if not bounds:
                raise ValueError("boundaries must be non-empty")
            if list(bounds) != sorted(set(bounds)):
                raise ValueError("boundaries must be strictly increasing")
            if bounds[0] <= 0 or bounds[-1] >= self.season_length:
                raise ValueError("boundaries must lie strictly inside the season")
            object.__setattr__(self, "boundaries", bounds)

    def n_states(self, log: EventLog | None = None) -> int:
        if self.band_length is not None:
            return self.season_length // self.band_length
        return len(self.boundaries) + 1

    def band_of(self, timestamp: int) -> int:
        offset = timestamp % self.season_length
        if self.band_length is not None:
            return offset // self.band_length
        return bisect_right(self.boundaries, offset)

    def assign_train(self, log: EventLog) -> list[WeightedStates]:
        return [[(self.band_of(e.timestamp), 1.0)] for e in log.events]

    def query_states(self, timestamp=None, recent=None) -> WeightedStates:
        if timestamp is None:
            raise ValueError("seasonal context needs a timestamp")
        return [(self.band_of(timestamp), 1.0)]


@dataclass(frozen=True)
class SequenceContext(ContextAssigner):
    """Context is the user's previous item (or its category).

    State 0 is reserved for "no previous event"; every real item/category
    index is shifted up by one. With ``history > 1`` an event gets up to
    ``history`` previous states, the k-th most recent weighted ``decay**k``,
    so older purchases count for less. Assignment is causal: only events
    that are strictly earlier in the sorted log contribute.
    """

    level: str = "item"
    history: int = 1
    decay: float = 1.0
    kind = "sequence"

    def __post_init__(self):
        if self.level not in ("item", "category"):
            raise ValueError("level must be 'item' or 'category'")
        if self.history < 1:
            raise ValueError("history must be >= 1")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must be in (0, 1]")

    def n_states(self, log: EventLog | None = None) -> int:
        if log is None:
            raise ValueError("sequential state count depends on the log")
        if self.level == "item":
            return len(log.items) + 1
        if not log.has_categories:
            raise ValueError("category-level context needs a category column")
        return len(log.categories) + 1

    def _state_key(self, event) -> int:
        if self.level == "item":
            return event.item
        if event.category is None:
            raise ValueError("event without category under category-level context")
        return event.category

    def assign_train(self, log: EventLog) -> list[WeightedStates]:
        tails: dict[int, list[int]] = {}
        out: list[WeightedStates] = []
        for event in log.events:
            recent = tails.get(event.user, [])
            out.append(self.states_from_recent(recent))
            recent = [self._state_key(event)] + recent
            tails[event.user] = recent[: self.history]
        return out

    def states_from_recent(self, recent: Sequence[int]) -> WeightedStates:
        """Weighted states given previous items/categories, newest first.

        Duplicates collapse to their largest (most recent) multiplier.
        """
        if not recent:
            return [(0, 1.0)]
        states: dict[int, float] = {}
        for k, key in enumerate(recent[: self.history]):
            state = key + 1
            weight = self.decay**k
            if state not in states:
                states[state] = weight
        return list(states.items())

    def tail_after(self, log: EventLog) -> dict[int, list[int]]:
        """Each user's last ``history`` state keys after consuming ``log``."""
        tails: dict[int, list[int]] = {}
        for event in log.events:
            recent = [self._state_key(event)] + tails.get(event.user, [])
            tails[event.user] = recent[: self.history]
        return tails

    def query_states(self, timestamp=None, recent=None) -> WeightedStates:
        return self.states_from_recent(recent or [])


def make_assigner(
    kind: str = "none",
    season_length: int = 86400,
    band_length: int = 14400,
    boundaries: Sequence[int] | None = None,
    level: str = "item",
    history: int = 1,
    decay: float = 1.0,
) -> ContextAssigner:
    """Build an assigner from flat configuration values."""
    if kind == "none":
        return NoContext()
    if kind == "season":
        if boundaries is not None:
            return SeasonContext(season_length, None, tuple(boundaries))
        return SeasonContext(season_length, band_length)
    if kind == "sequence":
        return SequenceContext(level=level, history=history, decay=decay)
    raise ValueError(f"unknown context kind: {kind!r}")
