"""Top-N evaluation over a time-based test set: recall@N and MAP@N.

Every test event is one recommendation opportunity: score all items for the
event's user and context, rank them, and check whether the event's item made
the cut. Recall counts hits over events; MAP averages the average precision
of one ranked list per (user, context) request. Test events whose user or
item never occurred in training count as automatic misses when the training
log is supplied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .context import ContextAssigner, blend_weights
from .data import EventLog
from .model import FactorModel


@dataclass
class EvalReport:
    recall_at_n: float
    map_at_n: float
    n: int
    events: int
    skipped: int
    per_event: list[tuple[int, int, int, int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "recall_at_n": self.recall_at_n,
                "map_at_n": self.map_at_n,
                "n": self.n,
                "events": self.events,
                "skipped": self.skipped,
            }
        )

    def per_event_csv(self) -> str:
        lines = ["user,item,context,rank"]
        lines += [f"{u},{i},{c},{r}" for u, i, c, r in self.per_event]
        return "\n".join(lines) + "\n"


def top_n(scores: np.ndarray, n: int, exclude: set | None = None) -> np.ndarray:
    """Indices of the ``n`` largest scores, descending.

    Ties break toward the smaller index, so rankings are deterministic.
    Excluded indices are skipped entirely (the result may then be shorter
    than ``n``).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(scores.size)
    if exclude:
        mask = np.ones(scores.size, dtype=bool)
        mask[list(exclude)] = False
        idx = idx[mask]
        scores = scores[mask]
    order = np.lexsort((idx, -scores))
    return idx[order[:n]]


def recall_at_n(
    ranked_lists: Sequence[Sequence[int]], test_items: Sequence[int], n: int
) -> float:
    """Fraction of test events whose item appears in its top-``n`` list."""
    if len(ranked_lists) != len(test_items):
        raise ValueError("one ranked list per test event required")
    if not test_items:
        return 0.0
    hits = sum(
        1 for ranked, item in zip(ranked_lists, test_items) if item in list(ranked[:n])
    )
    return hits / len(test_items)


def average_precision(ranked: Sequence[int], relevant: set, n: int) -> float:
    """AP at cutoff ``n``: mean precision at each relevant item's rank.

    Normalized by the total number of relevant items, which keeps the
    metric non-decreasing in ``n``.
    """
    if not relevant:
        return 0.0
    hits = 0
    total = 0.0
    for pos, item in enumerate(ranked[:n], start=1):
        if item in relevant:
            hits += 1
            total += hits / pos
    return total / len(relevant)


def map_at_n(
    ranked_lists: Sequence[Sequence[int]], relevant_sets: Sequence[set], n: int
) -> float:
    """Mean average precision over requests."""
    if len(ranked_lists) != len(relevant_sets):
        raise ValueError("one ranked list per request required")
    if not ranked_lists:
        return 0.0
    return float(
        np.mean([average_precision(r, s, n) for r, s in zip(ranked_lists, relevant_sets)])
    )


def _scores_for_request(model, user: int, states) -> np.ndarray:
    if isinstance(model, FactorModel):
        fixed: dict = {0: user}
        if model.ndim == 3:
            if not states:
                raise ValueError("a three-dimensional model needs a context state")
            fixed[2] = model.mixed_column(2, blend_weights(states))
        elif model.ndim != 2:
            raise ValueError("evaluation supports 2- or 3-dimensional models")
        return model.score_items(1, fixed)
    # Composite baseline: dispatch on the dominant context state.
    if not states:
        raise ValueError("the composite baseline needs a context state")
    primary = max(states, key=lambda sw: sw[1])[0]
    return model.scores_for(user, primary)


def evaluate(
    model,
    test: EventLog,
    assigner: ContextAssigner,
    n: int = 20,
    train: EventLog | None = None,
    exclude_train: bool = False,
    chain_test: bool = False,
    map_per_event: bool = False,
    distinct_pairs: bool = False,
    collect_per_event: bool = False,
) -> EvalReport:
    """Score every test event and aggregate recall@N and MAP@N.

    The context of a test event comes from its timestamp (seasonal) or from
    the user's last training events (sequential; pass ``chain_test=True`` to
    let consumed test events extend the history). When ``train`` is given,
    events whose user or item is absent from training are automatic misses,
    counted in the denominator and in ``skipped``. ``exclude_train`` removes
    each user's training items from their recommendation lists.

    MAP groups events into one request per (user, context states); with
    ``map_per_event`` every event is its own request. ``distinct_pairs``
    collapses repeated (user, item) test events to their first occurrence
    before scoring.

    Deterministic: the same model and test set produce an identical report.
    """
    if isinstance(model, FactorModel):
        n_users, n_items = model.sizes[0], model.sizes[1]
        if model.ndim == 3:
            states_declared = assigner.n_states(train if train is not None else test)
            if states_declared != model.sizes[2]:
                raise ValueError(
                    f"context mismatch: model has {model.sizes[2]} states, "
                    f"assigner declares {states_declared}"
                )
    else:
        n_users, n_items = model.n_users, model.n_items
        states_declared = assigner.n_states(train if train is not None else test)
        if states_declared != model.n_states:
            raise ValueError(
                f"context mismatch: composite has {model.n_states} states, "
                f"assigner declares {states_declared}"
            )

    train_users: set | None = None
    train_items: set | None = None
    user_train_items: dict[int, set] = {}
    if train is not None:
        train_users = {e.user for e in train.events}
        train_items = {e.item for e in train.events}
        if exclude_train:
            for e in train.events:
                user_train_items.setdefault(e.user, set()).add(e.item)

    sequential = getattr(assigner, "kind", None) == "sequence"
    tails: dict[int, list[int]] = {}
    if sequential and train is not None:
        tails = assigner.tail_after(train)

    events = test.events
    if distinct_pairs:
        seen_pairs: set[tuple[int, int]] = set()
        deduped = []
        for e in events:
            if (e.user, e.item) not in seen_pairs:
                seen_pairs.add((e.user, e.item))
                deduped.append(e)
        events = deduped

    total = 0
    hits = 0
    skipped = 0
    per_event: list[tuple[int, int, int, int]] = []
    # request key -> [ranked list or None, relevant item set]
    requests: dict[tuple, list] = {}
    request_order: list[tuple] = []
    ranked_cache: dict[tuple, list[int]] = {}

    def request_entry(key: tuple) -> list:
        entry = requests.get(key)
        if entry is None:
            entry = [None, set()]
            requests[key] = entry
            request_order.append(key)
        return entry

    for pos, event in enumerate(events):
        total += 1
        states = assigner.query_states(
            timestamp=event.timestamp, recent=tails.get(event.user)
        )
        state_key = tuple(sorted(states))
        group_key = (event.user, state_key, pos) if map_per_event else (event.user, state_key)

        unseen = (
            train is not None
            and (event.user not in train_users or event.item not in train_items)
        ) or event.user >= n_users
        rank = -1
        entry = request_entry(group_key)
        if unseen:
            skipped += 1
        else:
            cache_key = (event.user, state_key)
            ranked = ranked_cache.get(cache_key)
            if ranked is None:
                scores = _scores_for_request(model, event.user, states)
                exclude = user_train_items.get(event.user) if exclude_train else None
                ranked = top_n(scores, n, exclude).tolist()
                ranked_cache[cache_key] = ranked
            if event.item in ranked:
                rank = ranked.index(event.item) + 1
                hits += 1
            if entry[0] is None:
                entry[0] = ranked
        entry[1].add(event.item)

        if collect_per_event:
            primary = max(states, key=lambda sw: sw[1])[0] if states else -1
            per_event.append((event.user, event.item, primary, rank))

        if sequential and chain_test:
            key = assigner._state_key(event)
            tails[event.user] = ([key] + tails.get(event.user, []))[: assigner.history]

    recall = hits / total if total else 0.0
    ap_values = []
    for key in request_order:
        ranked, relevant = requests[key]
        ap_values.append(0.0 if ranked is None else average_precision(ranked, relevant, n))
    mean_ap = float(np.mean(ap_values)) if ap_values else 0.0

    return EvalReport(
        recall_at_n=recall,
        map_at_n=mean_ap,
        n=n,
        events=total,
        skipped=skipped,
        per_event=per_event,
    )
