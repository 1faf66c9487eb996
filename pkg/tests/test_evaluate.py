"""Ranking, recall@N, MAP@N, and the end-to-end evaluator."""

import numpy as np
import pytest

from itals import (
    FactorModel,
    NoContext,
    SeasonContext,
    SequenceContext,
    evaluate,
    init_model,
    map_at_n,
    parse_event_log,
    recall_at_n,
    time_split,
    top_n,
)
from itals.evaluate import average_precision


class TestTopN:
    def test_descending_order(self):
        assert top_n([0.1, 0.9, 0.5], 2).tolist() == [1, 2]

    def test_tie_breaks_to_lower_index(self):
        assert top_n([0.5, 0.5], 1).tolist() == [0]

    def test_exclusions_skipped(self):
        assert top_n([0.1, 0.9, 0.5], 2, exclude={1}).tolist() == [2, 0]

    def test_short_when_everything_excluded(self):
        assert top_n([0.1, 0.9], 5, exclude={1}).tolist() == [0]

    def test_n_validated(self):
        with pytest.raises(ValueError):
            top_n([0.5], 0)


class TestRecallAtN:
    def test_all_hits(self):
        lists = [[0, 1], [2, 3]]
        assert recall_at_n(lists, [0, 3], 2) == 1.0

    def test_no_hits(self):
        assert recall_at_n([[0], [1]], [5, 5], 1) == 0.0

    def test_one_of_four(self):
        lists = [[9], [9], [9], [7]]
        assert recall_at_n(lists, [1, 2, 3, 7], 1) == 0.25

    def test_cutoff_applies(self):
        assert recall_at_n([[4, 8]], [8], 1) == 0.0
        assert recall_at_n([[4, 8]], [8], 2) == 1.0


class TestMapAtN:
    def test_relevant_at_rank_one(self):
        assert map_at_n([[7, 1, 2]], [{7}], 20) == 1.0

    def test_relevant_at_rank_two(self):
        assert map_at_n([[1, 7, 2]], [{7}], 20) == 0.5

    def test_two_relevant_ranks_one_and_three(self):
        assert map_at_n([[7, 1, 8]], [{7, 8}], 20) == pytest.approx(5 / 6)

    def test_mean_over_requests(self):
        value = map_at_n([[7], [1]], [{7}, {7}], 1)
        assert value == pytest.approx(0.5)

    def test_ap_non_decreasing_in_n(self):
        rng = np.random.default_rng(2)
        ranked = rng.permutation(30).tolist()
        relevant = set(rng.choice(30, size=6, replace=False).tolist())
        values = [average_precision(ranked, relevant, n) for n in range(1, 31)]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def _perfect_model(test_log, n_users, n_items):
    """K = n_items one-hot model scoring 1 for each user's true test item."""
    k = n_items
    user_m = np.zeros((k, n_users))
    item_m = np.eye(k)
    for e in test_log.events:
        user_m[e.item, e.user] = 1.0
    return FactorModel([user_m, item_m], ["user", "item"])


class TestEvaluate:
    def _logs(self):
        text = "\n".join(
            ["a\tx\t10", "b\ty\t20", "a\ty\t30", "b\tx\t40", "a\tx\t110", "b\ty\t120"]
        )
        return time_split(parse_event_log(text), 100)

    def test_perfect_oracle_scores_one(self):
        train, test = self._logs()
        model = _perfect_model(test, len(train.users), len(train.items))
        report = evaluate(model, test, NoContext(), n=20, train=train)
        assert report.recall_at_n == 1.0
        assert report.map_at_n == 1.0
        assert report.events == 2 and report.skipped == 0

    def test_constant_scores_deterministic(self):
        train, test = self._logs()
        k = 1
        model = FactorModel(
            [np.ones((k, len(train.users))), np.ones((k, len(train.items)))],
            ["user", "item"],
        )
        r1 = evaluate(model, test, NoContext(), n=1, train=train)
        r2 = evaluate(model, test, NoContext(), n=1, train=train)
        assert r1.to_json() == r2.to_json()
        # ties resolve to item index 0 == "x": the user-a event at t=110 hits
        assert r1.recall_at_n == 0.5

    def test_unseen_user_is_automatic_miss(self):
        log = parse_event_log("a\tx\t10\nb\tx\t200")
        train, test = time_split(log, 100)
        model = init_model((len(log.users), len(log.items)), 2, seed=0)
        report = evaluate(model, test, NoContext(), n=20, train=train)
        assert report.events == 1
        assert report.skipped == 1
        assert report.recall_at_n == 0.0

    def test_unseen_item_is_automatic_miss(self):
        log = parse_event_log("a\tx\t10\na\tz\t200")
        train, test = time_split(log, 100)
        model = init_model((len(log.users), len(log.items)), 2, seed=0)
        report = evaluate(model, test, NoContext(), n=20, train=train)
        assert report.skipped == 1 and report.recall_at_n == 0.0

    def test_exclude_train_items(self):
        train, test = self._logs()
        k = 1
        model = FactorModel(
            [np.ones((k, 2)), np.array([[1.0, 0.5]])], ["user", "item"]
        )
        # without exclusion both users see item x first
        base = evaluate(model, test, NoContext(), n=1, train=train)
        excl = evaluate(model, test, NoContext(), n=1, train=train, exclude_train=True)
        assert base.recall_at_n == 0.5
        # both users interacted with both items in train: nothing recommendable
        assert excl.recall_at_n == 0.0

    def test_seasonal_context_blend(self):
        log = parse_event_log("a\tx\t0\na\ty\t43200\na\tx\t86400\na\ty\t129600")
        train, test = time_split(log, 86000)
        season = SeasonContext(86400, 43200)
        # context column one-hot: band 0 boosts item x, band 1 boosts item y
        user_m = np.ones((2, 1))
        item_m = np.array([[1.0, 0.0], [0.0, 1.0]])
        ctx_m = np.array([[1.0, 0.0], [0.0, 1.0]])
        model = FactorModel([user_m, item_m, ctx_m], ["user", "item", "season"])
        report = evaluate(model, test, season, n=1, train=train)
        assert report.recall_at_n == 1.0

    def test_sequential_context_from_train_tail(self):
        log = parse_event_log("a\tx\t10\na\ty\t200")
        train, test = time_split(log, 100)
        seq = SequenceContext()
        n_states = seq.n_states(train)
        k = 2
        user_m = np.ones((k, 1))
        item_m = np.array([[1.0, 0.0], [0.0, 1.0]])
        # context state for "previous item x" (state 1) boosts item y
        ctx_m = np.zeros((k, n_states))
        ctx_m[:, 1] = [0.0, 1.0]
        model = FactorModel([user_m, item_m, ctx_m], ["user", "item", "sequence"])
        report = evaluate(model, test, seq, n=1, train=train)
        assert report.recall_at_n == 1.0

    def test_context_size_mismatch_rejected(self):
        train, test = self._logs()
        model = init_model((2, 2, 5), 2, seed=0)
        with pytest.raises(ValueError, match="context mismatch"):
            evaluate(model, test, SeasonContext(86400, 43200), n=5, train=train)

    def test_recall_non_decreasing_in_n(self):
        rng = np.random.default_rng(9)
        lines = [
            f"u{rng.integers(6)}\ti{rng.integers(10)}\t{t * 10}" for t in range(80)
        ]
        train, test = time_split(parse_event_log("\n".join(lines)), 600)
        model = init_model((len(train.users), len(train.items)), 3, seed=4)
        last_recall, last_map = 0.0, 0.0
        for n in (1, 3, 5, 10, 20):
            report = evaluate(model, test, NoContext(), n=n, train=train)
            assert report.recall_at_n >= last_recall - 1e-12
            assert report.map_at_n >= last_map - 1e-12
            last_recall, last_map = report.recall_at_n, report.map_at_n

    def test_map_per_event_flag(self):
        train, test = self._logs()
        model = _perfect_model(test, len(train.users), len(train.items))
        grouped = evaluate(model, test, NoContext(), n=20, train=train)
        per_event = evaluate(
            model, test, NoContext(), n=20, train=train, map_per_event=True
        )
        assert grouped.map_at_n == per_event.map_at_n == 1.0

    def test_distinct_pairs_dedupes(self):
        log = parse_event_log("a\tx\t10\na\ty\t200\na\ty\t300")
        train, test = time_split(log, 100)
        model = init_model((1, 2), 2, seed=0)
        base = evaluate(model, test, NoContext(), n=2, train=train)
        deduped = evaluate(
            model, test, NoContext(), n=2, train=train, distinct_pairs=True
        )
        assert base.events == 2
        assert deduped.events == 1

    def test_per_event_records(self):
        train, test = self._logs()
        model = _perfect_model(test, len(train.users), len(train.items))
        report = evaluate(
            model, test, NoContext(), n=20, train=train, collect_per_event=True
        )
        assert len(report.per_event) == 2
        for user, item, context, rank in report.per_event:
            assert rank == 1 and context == -1
        csv = report.per_event_csv()
        assert csv.splitlines()[0] == "user,item,context,rank"

    def test_composite_dispatch(self):
        from itals import TrainConfig, train_per_context_baseline

        log = parse_event_log(
            "\n".join(
                [
                    "a\tx\t0",
                    "b\ty\t0",
                    "a\ty\t43200",
                    "b\tx\t43200",
                    "a\tx\t86400",
                    "b\ty\t129600",
                ]
            )
        )
        train_log, test_log = time_split(log, 86000)
        season = SeasonContext(86400, 43200)
        config = TrainConfig(solver="als", epochs=4, reg=0.1)
        composite = train_per_context_baseline(train_log, season, 2, config)
        report = evaluate(composite, test_log, season, n=1, train=train_log)
        assert report.events == 2
        assert 0.0 <= report.recall_at_n <= 1.0

    def test_report_json_shape(self):
        train, test = self._logs()
        model = _perfect_model(test, len(train.users), len(train.items))
        report = evaluate(model, test, NoContext(), n=20, train=train)
        import json

        decoded = json.loads(report.to_json())
        assert list(decoded) == ["recall_at_n", "map_at_n", "n", "events", "skipped"]
