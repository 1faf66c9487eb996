"""Command-line interface: train, evaluate, recommend, bench.

Exit codes: 0 success, 2 usage errors, 3 data or configuration errors,
4 numerical failures (divergence, singular systems).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .context import make_assigner
from .data import ParseError, parse_event_log, time_split, build_tensor
from .evaluate import evaluate, top_n
from .model import ModelFormatError, init_model, load_model, save_model
from .solvers import (
    SingularSystemError,
    SolverDivergence,
    TrainConfig,
    _UPDATERS,
    train,
)

_THREAD_LIMITER = None


class ConfigError(ValueError):
    """Bad configuration file contents."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# config-file key -> (argparse dest, parser, default)
_SETTINGS = {
    "context.kind": ("context", str, "none"),
    "context.season_length": ("season_length", int, 86400),
    "context.band_length": ("band_length", int, 14400),
    "context.level": ("level", str, "item"),
    "context.history": ("history", int, 1),
    "context.decay": ("decay", float, 1.0),
    "factors": ("factors", int, 20),
    "epochs": ("epochs", int, 10),
    "solver": ("solver", str, "cg"),
    "inner_iters": ("inner_iters", int, 2),
    "w0": ("w0", float, 1.0),
    "wt": ("wt", float, 100.0),
    "count_scaling": ("count_scaling", _parse_bool, False),
    "alpha": ("alpha", float, 99.0),
    "lambda": ("lam", float, 0.01),
    "reg_mode": ("reg_mode", str, "support"),
    "p0": ("p0", float, 0.0),
    "seed": ("seed", int, 0),
    "threads": ("threads", int, 0),
    "cutoff": ("cutoff", int, 20),
}


def load_config(path: str) -> dict:
    """Parse a flat key=value config file into argparse-dest keyed values."""
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _SETTINGS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            dest, parse, _ = _SETTINGS[key]
            try:
                values[dest] = parse(value.strip())
            except ValueError as err:
                raise ConfigError(f"{path}:{line_no}: {err}") from None
    return values


class Settings:
    """Flag values merged over config-file values merged over defaults."""

    def __init__(self, args: argparse.Namespace):
        self._args = args
        self._config = load_config(args.config) if getattr(args, "config", None) else {}
        self._defaults = {dest: default for _, (dest, _, default) in _SETTINGS.items()}

    def __getattr__(self, dest):
        value = getattr(self._args, dest, None)
        if value is not None:
            return value
        if dest in self._config:
            return self._config[dest]
        if dest in self._defaults:
            return self._defaults[dest]
        raise AttributeError(dest)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--threads", type=int, help="BLAS threads (0 = all cores)")
    parser.add_argument("--seed", type=int, help="random seed (default 0)")


def _add_context(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--context", choices=["none", "season", "sequence"], help="context kind"
    )
    parser.add_argument("--season-length", type=int, help="season period in seconds")
    parser.add_argument("--band-length", type=int, help="time-band length in seconds")
    parser.add_argument(
        "--band-boundaries",
        type=_int_list,
        help="explicit interior band boundaries (comma-separated season offsets)",
    )
    parser.add_argument(
        "--level", choices=["item", "category"], help="sequential context level"
    )
    parser.add_argument("--history", type=int, help="previous events to use as context")
    parser.add_argument("--decay", type=float, help="weight multiplier per step back")


def _assigner_from(settings: Settings, args: argparse.Namespace):
    return make_assigner(
        kind=settings.context,
        season_length=settings.season_length,
        band_length=settings.band_length,
        boundaries=getattr(args, "band_boundaries", None),
        level=settings.level,
        history=settings.history,
        decay=settings.decay,
    )


def _apply_threads(n: int) -> None:
    global _THREAD_LIMITER
    if n is None:
        n = int(os.environ.get("ITALS_THREADS", "0") or "0")
    if n <= 0:
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("warning: threadpoolctl unavailable, --threads ignored", file=sys.stderr)
        return
    _THREAD_LIMITER = threadpool_limits(limits=n)


def _read_file(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def cmd_train(args: argparse.Namespace) -> int:
    settings = Settings(args)
    _apply_threads(settings.threads)
    log = parse_event_log(_read_file(args.input))
    if args.split_time is not None:
        log, _ = time_split(log, args.split_time)
    assigner = _assigner_from(settings, args)
    tensor = build_tensor(
        log,
        assigner,
        w0=settings.w0,
        wt=settings.wt,
        count_scaling=settings.count_scaling,
        alpha=settings.alpha,
    )
    model = init_model(tensor.sizes, settings.factors, settings.seed)
    if tensor.ndim == 3:
        model.dim_roles = ["user", "item", assigner.kind]
    config = TrainConfig(
        solver=settings.solver,
        epochs=settings.epochs,
        reg=settings.lam,
        reg_mode=settings.reg_mode,
        inner_iters=settings.inner_iters,
        w0=settings.w0,
        p0=settings.p0,
        seed=settings.seed,
    )
    trace_sink = open(args.trace, "w", encoding="utf-8") if args.trace else None
    try:
        callback = None
        if trace_sink is not None:
            callback = lambda record: print(json.dumps(record), file=trace_sink)
        trace = train(model, tensor, config, callbacks=callback)
    finally:
        if trace_sink is not None:
            trace_sink.close()
    save_model(model, args.output)
    print(
        f"trained {config.solver} model: K={settings.factors} "
        f"sizes={tensor.sizes} cells={tensor.n_positive} "
        f"final_loss={trace[-1]!r} -> {args.output}"
    )
    return 0


def _load_eval_logs(args: argparse.Namespace):
    two_file = args.train is not None or args.test is not None
    split_mode = args.input is not None
    if two_file == split_mode:
        raise ValueError(
            "give either --input with --split-time, or --train and --test"
        )
    if split_mode:
        if args.split_time is None:
            raise ValueError("--input requires --split-time")
        log = parse_event_log(_read_file(args.input))
        return time_split(log, args.split_time)
    if args.train is None or args.test is None:
        raise ValueError("--train and --test must be given together")
    train_log = parse_event_log(_read_file(args.train))
    test_log = parse_event_log(_read_file(args.test), vocab_from=train_log)
    return train_log, test_log


def cmd_evaluate(args: argparse.Namespace) -> int:
    settings = Settings(args)
    _apply_threads(settings.threads)
    model = load_model(args.model)
    train_log, test_log = _load_eval_logs(args)
    assigner = _assigner_from(settings, args)
    report = evaluate(
        model,
        test_log,
        assigner,
        n=settings.cutoff,
        train=train_log,
        exclude_train=args.exclude_train,
        chain_test=args.chain_test,
        map_per_event=args.map_per_event,
        distinct_pairs=args.distinct_pairs,
        collect_per_event=args.per_event is not None,
    )
    if args.per_event:
        with open(args.per_event, "w", encoding="utf-8") as fh:
            fh.write(report.per_event_csv())
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    else:
        print(report.to_json())
    return 0


def cmd_recommend(args: argparse.Namespace) -> int:
    settings = Settings(args)
    _apply_threads(settings.threads)
    model = load_model(args.model)
    train_log = None
    if args.train:
        train_log = parse_event_log(_read_file(args.train))

    try:
        user = int(args.user)
    except ValueError:
        if train_log is None:
            raise ValueError(
                f"user {args.user!r} is not an index; give --train to resolve keys"
            ) from None
        resolved = train_log.users.get(args.user)
        if resolved is None:
            raise ValueError(f"unknown user key: {args.user!r}") from None
        user = resolved
    if not 0 <= user < model.sizes[0]:
        raise ValueError(f"user index {user} out of range (0..{model.sizes[0] - 1})")

    fixed: dict = {0: user}
    if model.ndim == 3:
        if args.context_state is not None:
            state = args.context_state
        elif args.at_timestamp is not None:
            assigner = _assigner_from(settings, args)
            states = assigner.query_states(timestamp=args.at_timestamp)
            if not states:
                raise ValueError("--at-timestamp needs a seasonal context")
            state = states[0][0]
        else:
            raise ValueError(
                "this model has a context dimension; give --context-state "
                "or --at-timestamp"
            )
        if not 0 <= state < model.sizes[2]:
            raise ValueError(f"context state {state} out of range")
        fixed[2] = state
    elif args.context_state is not None or args.at_timestamp is not None:
        raise ValueError("this model has no context dimension")

    scores = model.score_items(1, fixed)
    ranked = top_n(scores, args.top)
    for rank, item in enumerate(ranked, start=1):
        label = train_log.items.key_of(int(item)) if train_log else str(int(item))
        print(f"{rank}\t{label}\t{scores[item]!r}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    settings = Settings(args)
    _apply_threads(settings.threads)
    log = parse_event_log(_read_file(args.input))
    assigner = _assigner_from(settings, args)
    tensor = build_tensor(
        log,
        assigner,
        w0=settings.w0,
        wt=settings.wt,
        count_scaling=settings.count_scaling,
        alpha=settings.alpha,
    )
    lines = ["solver,factors,mean_epoch_ms"]
    for solver in args.solver_list:
        if solver not in _UPDATERS:
            raise ValueError(f"unknown solver: {solver!r}")
        update = _UPDATERS[solver]
        for k in args.factors_list:
            model = init_model(tensor.sizes, k, settings.seed)
            config = TrainConfig(
                solver=solver,
                epochs=1,
                reg=settings.lam,
                reg_mode=settings.reg_mode,
                inner_iters=settings.inner_iters,
                w0=settings.w0,
                p0=settings.p0,
                seed=settings.seed,
            )
            times = []
            for _ in range(args.repeats):
                start = time.perf_counter()
                for dim in range(model.ndim):
                    update(model, tensor, dim, config)
                times.append((time.perf_counter() - start) * 1000.0)
            lines.append(f"{solver},{k},{np.mean(times):.3f}")
    text = "\n".join(lines) + "\n"
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itals",
        description="Context-aware implicit-feedback recommendation "
        "via weighted tensor factorization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from an event file")
    p_train.add_argument("--input", required=True, help="TSV event file")
    p_train.add_argument("--output", required=True, help="model file to write")
    p_train.add_argument("--split-time", type=int, help="train on events before this")
    p_train.add_argument("--trace", help="JSON-lines training trace file")
    p_train.add_argument("--factors", type=_positive_int, help="feature count K")
    p_train.add_argument("--epochs", type=_positive_int, help="training epochs")
    p_train.add_argument("--solver", choices=["als", "cd", "cg"], help="column solver")
    p_train.add_argument("--inner-iters", type=_positive_int, help="CD/CG iterations")
    p_train.add_argument("--w0", type=float, help="baseline weight for zeros")
    p_train.add_argument("--wt", type=float, help="weight of an observed cell")
    p_train.add_argument(
        "--count-scaling",
        action=argparse.BooleanOptionalAction,
        help="scale weights with occurrence counts",
    )
    p_train.add_argument("--alpha", type=float, help="count-scaling slope")
    p_train.add_argument("--lambda", dest="lam", type=float, help="regularization")
    p_train.add_argument("--reg-mode", choices=["constant", "support"])
    p_train.add_argument("--p0", type=float, help="preference value of zeros (CD)")
    _add_context(p_train)
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="recall@N / MAP@N on a test split")
    p_eval.add_argument("--model", required=True, help="model file")
    p_eval.add_argument("--input", help="full event file (with --split-time)")
    p_eval.add_argument("--split-time", type=int)
    p_eval.add_argument("--train", help="training event file")
    p_eval.add_argument("--test", help="test event file")
    p_eval.add_argument("--cutoff", type=_positive_int, help="list length N")
    p_eval.add_argument("--exclude-train", action="store_true")
    p_eval.add_argument("--chain-test", action="store_true")
    p_eval.add_argument("--map-per-event", action="store_true")
    p_eval.add_argument("--distinct-pairs", action="store_true")
    p_eval.add_argument("--per-event", help="per-event CSV output path")
    p_eval.add_argument("--output", help="report JSON output path (default stdout)")
    p_eval.add_argument("--w0", type=float)
    p_eval.add_argument("--wt", type=float)
    _add_context(p_eval)
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_rec = sub.add_parser("recommend", help="top-N items for a user")
    p_rec.add_argument("--model", required=True)
    p_rec.add_argument("--user", required=True, help="user index (or key with --train)")
    p_rec.add_argument("--train", help="event file for key lookups")
    p_rec.add_argument("--top", type=_positive_int, default=10)
    p_rec.add_argument("--context-state", type=int)
    p_rec.add_argument("--at-timestamp", type=int)
    _add_context(p_rec)
    _add_common(p_rec)
    p_rec.set_defaults(func=cmd_recommend)

    p_bench = sub.add_parser("bench", help="epoch timings per solver and K")
    p_bench.add_argument("--input", required=True)
    p_bench.add_argument("--factors-list", type=_int_list, default=[10, 20, 40])
    p_bench.add_argument("--solver-list", type=_str_list, default=["als", "cd", "cg"])
    p_bench.add_argument("--repeats", type=_positive_int, default=3)
    p_bench.add_argument("--output", help="CSV output path (default stdout)")
    p_bench.add_argument("--w0", type=float)
    p_bench.add_argument("--wt", type=float)
    p_bench.add_argument(
        "--count-scaling", action=argparse.BooleanOptionalAction
    )
    p_bench.add_argument("--alpha", type=float)
    p_bench.add_argument("--lambda", dest="lam", type=float)
    p_bench.add_argument("--reg-mode", choices=["constant", "support"])
    p_bench.add_argument("--inner-iters", type=_positive_int)
    p_bench.add_argument("--p0", type=float)
    _add_context(p_bench)
    _add_common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SolverDivergence, SingularSystemError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 4
    except (ParseError, ModelFormatError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
