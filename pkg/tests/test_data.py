"""Event parsing, time splits, and tensor construction."""

import numpy as np
import pytest

from itals import (
    EventLog,
    ParseError,
    SeasonContext,
    SequenceContext,
    SparseTensor,
    build_tensor,
    parse_event_log,
    time_split,
)


class TestParseEventLog:
    def test_sorts_and_interns_first_seen(self):
        log = parse_event_log("u1\ti1\t100\nu2\ti1\t50")
        assert len(log) == 2
        assert log.users.get("u1") == 0 and log.users.get("u2") == 1
        assert log.items.get("i1") == 0
        assert [(e.user, e.item, e.timestamp) for e in log.events] == [
            (1, 0, 50),
            (0, 0, 100),
        ]

    def test_empty_input(self):
        log = parse_event_log("")
        assert len(log) == 0
        assert len(log.users) == 0 and len(log.items) == 0

    def test_non_numeric_timestamp_reports_line(self):
        with pytest.raises(ParseError) as err:
            parse_event_log("u1\ti1\tabc")
        assert err.value.line_no == 1

    def test_error_line_number_skips_comments(self):
        with pytest.raises(ParseError) as err:
            parse_event_log("# header\nu1\ti1\t5\nu1\ti1\tbad")
        assert err.value.line_no == 3

    def test_category_column(self):
        log = parse_event_log("u1\ti1\t10\tc1\nu1\ti2\t20\tc2")
        assert log.has_categories
        assert [e.category for e in log.events] == [0, 1]

    def test_negative_timestamp_rejected(self):
        with pytest.raises(ParseError):
            parse_event_log("u1\ti1\t-4")

    def test_field_count_mismatch(self):
        with pytest.raises(ParseError):
            parse_event_log("u1\ti1")

    def test_comments_and_blank_lines_ignored(self):
        log = parse_event_log("# c\n\nu1\ti1\t3\n")
        assert len(log) == 1

    def test_stable_sort_on_ties(self):
        log = parse_event_log("u1\ti1\t7\nu2\ti2\t7")
        assert [(e.user, e.item) for e in log.events] == [(0, 0), (1, 1)]

    def test_shared_vocab_extension(self):
        train = parse_event_log("u1\ti1\t1")
        test = parse_event_log("u1\ti2\t9\nu2\ti1\t10", vocab_from=train)
        assert test.users.get("u1") == 0
        assert test.items.get("i2") == 1
        assert train.users is test.users


class TestTimeSplit:
    def _log(self):
        return parse_event_log("a\tx\t10\nb\ty\t20\nc\tz\t30")

    def test_basic_split(self):
        train, test = time_split(self._log(), 25)
        assert [e.timestamp for e in train.events] == [10, 20]
        assert [e.timestamp for e in test.events] == [30]

    def test_all_test(self):
        train, test = time_split(self._log(), 5)
        assert len(train) == 0 and len(test) == 3

    def test_all_train(self):
        train, test = time_split(self._log(), 31)
        assert len(train) == 3 and len(test) == 0

    def test_boundary_goes_to_test(self):
        train, test = time_split(self._log(), 20)
        assert [e.timestamp for e in train.events] == [10]
        assert [e.timestamp for e in test.events] == [20, 30]

    def test_vocab_shared(self):
        train, test = time_split(self._log(), 25)
        assert train.users is test.users
        assert test.items.get("z") is not None


class TestBuildTensor:
    def test_single_event_default_weight(self):
        log = parse_event_log("u\ti\t0")
        tensor = build_tensor(log, w0=1.0, wt=100.0)
        assert tensor.sizes == (1, 1)
        assert tensor.weight_at((0, 0)) == 100.0

    def test_count_scaling(self):
        log = parse_event_log("u\ti\t0\nu\ti\t5\nu\ti\t9")
        tensor = build_tensor(log, w0=1.0, count_scaling=True, alpha=99.0)
        assert tensor.weight_at((0, 0)) == pytest.approx(1 + 297)

    def test_two_events_two_cells(self):
        log = parse_event_log("u\ti\t0\nu\tj\t5")
        tensor = build_tensor(log)
        assert tensor.n_positive == 2

    def test_duplicates_collapse_without_scaling(self):
        log = parse_event_log("u\ti\t0\nu\ti\t5")
        tensor = build_tensor(log, wt=100.0)
        assert tensor.n_positive == 1
        assert tensor.weight_at((0, 0)) == 100.0

    def test_seasonal_states_set_third_dimension(self):
        log = parse_event_log("u\ti\t0\nu\ti\t43200")
        season = SeasonContext(86400, 43200)
        tensor = build_tensor(log, season)
        assert tensor.sizes == (1, 1, 2)
        assert tensor.n_positive == 2

    def test_multi_state_weight_multipliers(self):
        # history [A, B]: the second event's context is A at full weight; a
        # two-deep history with decay also writes the no-previous state cell.
        log = parse_event_log("u\tA\t0\nu\tB\t10")
        seq = SequenceContext(level="item", history=2, decay=0.5)
        tensor = build_tensor(log, seq, w0=1.0, wt=100.0)
        # event A: no-previous (state 0); event B: previous item A (state 1)
        assert tensor.weight_at((0, 1, 1)) == pytest.approx(100.0)
        assert tensor.weight_at((0, 0, 0)) == pytest.approx(100.0)

    def test_decayed_second_state(self):
        log = parse_event_log("u\tA\t0\nu\tB\t10\nu\tC\t20")
        seq = SequenceContext(level="item", history=2, decay=0.5)
        tensor = build_tensor(log, seq, w0=1.0, wt=100.0)
        # event C sees B at decay^0 and A at decay^1
        assert tensor.weight_at((0, 2, 2)) == pytest.approx(100.0)
        assert tensor.weight_at((0, 2, 1)) == pytest.approx(1 + 99 * 0.5)

    def test_deterministic(self):
        log = parse_event_log("u\ti\t0\nv\tj\t5\nu\tj\t9")
        t1 = build_tensor(log)
        t2 = build_tensor(log)
        assert np.array_equal(t1.indices, t2.indices)
        assert np.array_equal(t1.weights, t2.weights)

    def test_all_weights_exceed_w0(self):
        rng = np.random.default_rng(0)
        users = [f"u{rng.integers(5)}" for _ in range(60)]
        items = [f"i{rng.integers(7)}" for _ in range(60)]
        lines = "\n".join(
            f"{u}\t{i}\t{int(rng.integers(0, 86400 * 3))}" for u, i in zip(users, items)
        )
        log = parse_event_log(lines)
        seq = SequenceContext(level="item", history=2, decay=0.3)
        tensor = build_tensor(log, seq, w0=1.0, wt=100.0)
        assert (tensor.weights > tensor.w0).all()
        assert tensor.n_positive <= len(log) * 2

    def test_parameter_validation(self):
        log = parse_event_log("u\ti\t0")
        with pytest.raises(ValueError):
            build_tensor(log, w0=0.0)
        with pytest.raises(ValueError):
            build_tensor(log, w0=1.0, wt=1.0)
        with pytest.raises(ValueError):
            build_tensor(log, count_scaling=True, alpha=0.0)

    def test_assigner_state_out_of_range(self):
        class BadAssigner:
            kind = "bad"

            def n_states(self, log):
                return 1

            def assign_train(self, log):
                return [[(5, 1.0)] for _ in log.events]

        log = parse_event_log("u\ti\t0")
        with pytest.raises(IndexError):
            build_tensor(log, BadAssigner())


class TestSparseTensor:
    def test_rejects_weight_at_or_below_w0(self):
        with pytest.raises(ValueError):
            SparseTensor.from_cells((2, 2), {(0, 0): 1.0}, 1.0)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            SparseTensor.from_cells((2, 2), {(0, 5): 2.0}, 1.0)

    def test_rejects_duplicates(self):
        indices = np.array([[0, 0], [0, 0]])
        with pytest.raises(ValueError):
            SparseTensor((2, 2), indices, np.array([2.0, 3.0]), 1.0)

    def test_rows_for_groups_cells(self):
        tensor = SparseTensor.from_cells(
            (3, 2), {(0, 0): 2.0, (0, 1): 2.0, (2, 1): 2.0}, 1.0
        )
        rows = tensor.rows_for(0, 0)
        assert {tuple(tensor.indices[r]) for r in rows} == {(0, 0), (0, 1)}
        assert tensor.rows_for(0, 1).size == 0

    def test_weight_at_baseline_for_missing(self):
        tensor = SparseTensor.from_cells((2, 2), {(1, 1): 4.0}, 1.0)
        assert tensor.weight_at((0, 0)) == 1.0
        assert tensor.value_at((1, 1)) == 1
