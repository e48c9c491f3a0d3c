"""Command-line entry point: ``flora <command> [options]``.

Exit codes: 0 ok, 1 usage or rejected input, 2 format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from ._binary import atomic_write
from .data import EmbeddingSet, gen_synth, read_config, read_csv_embeddings, read_matrix, write_matrix
from .errors import ConfigError, FormatError, InputError, NumericError
from .evaluation import ground_truth, hamming_recall_curve, reranked_recall_curve, write_gnuplot, write_multitable_csv
from .experiments import ablation, mean_curve, multitable_rows
from .hashmodel import HashConfig, encode_binary, load_model, save_model
from .index import build_index, load_index, pack_codes, rank_full_scan, rerank_with_f, save_index
from .measures import KINDS, load_measure, make_measure, save_measure
from .sampler import VARIANTS, SamplingStrategy
from .trainer import TrainConfig, grid_search_lambdas, prepare_cache, train, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("flora")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _load_set(path, role: str) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return read_csv_embeddings(path, role)[1].vectors.astype(np.float64)
    return read_matrix(path).vectors.astype(np.float64)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--iterations", type=int, default=20_000)
    g.add_argument("--batch-size", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bits", type=int, default=HashConfig.m, help="code length m")
    g.add_argument("--lambda-u", type=float, default=HashConfig.lambda_u)
    g.add_argument("--lambda-i", type=float, default=HashConfig.lambda_i)
    g.add_argument("--strategy", choices=VARIANTS, default="rank_neg")
    g.add_argument("--p", type=float, default=0.5, help="probability of drawing a positive")
    g.add_argument("--n-pos", type=int, default=10)
    g.add_argument("--tower-sizes", type=_ints, default=HashConfig.tower_sizes)
    g.add_argument("--shared-sizes", type=_ints, default=HashConfig.shared_sizes)
    g.add_argument("--eval-every", type=int, default=1000)
    g.add_argument("--validation-fraction", type=float, default=0.1)
    g.add_argument("--lr", type=float, default=1e-3)


def _train_config(a) -> TrainConfig:
    return TrainConfig(
        iterations=a.iterations,
        batch_size=a.batch_size,
        seed=a.seed,
        strategy=SamplingStrategy(a.strategy, a.p, a.n_pos),
        hash=HashConfig(m=a.bits, lambda_u=a.lambda_u, lambda_i=a.lambda_i,
                        tower_sizes=tuple(a.tower_sizes), shared_sizes=tuple(a.shared_sizes)),
        eval_every=a.eval_every,
        validation_fraction=a.validation_fraction,
        lr=a.lr,
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="flora", description="Asymmetric hashing for fast ranking under a frozen measure.")
    parser.add_argument("--config", help="key=value file; command-line flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write synthetic user/item matrices")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--test-users", type=int, default=1000)
    p.add_argument("--items", type=int, default=5000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--item-dim", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distribution", choices=("gaussian", "clusters"), default="gaussian")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-measure", help="instantiate a frozen measure")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--user-dim", type=int, required=True)
    p.add_argument("--item-dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=_ints, default=(64, 64))
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a hash model")
    p.add_argument("--users", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--measure", required=True)
    p.add_argument("--out", required=True, help="model checkpoint path")
    p.add_argument("--log", help="training log CSV path")
    p.add_argument("--grid-u", type=_floats, help="grid-search lambda_u over these values")
    p.add_argument("--grid-i", type=_floats, help="grid-search lambda_i over these values")
    p.add_argument("--grid-iterations", type=int, help="per-cell budget for the grid search")
    _add_train_flags(p)

    p = sub.add_parser("build-index", help="encode items with one or more models")
    p.add_argument("--items", required=True)
    p.add_argument("--model", action="append", required=True, help="repeat for multiple tables")
    p.add_argument("--seeds", type=_ints, help="training seed of each model, for the manifest")
    p.add_argument("--out", required=True, help="index directory")

    p = sub.add_parser("query", help="rank items for one user")
    p.add_argument("--index", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--user-row", type=int, default=0)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--table", type=int, default=0)
    p.add_argument("--rerank", action="store_true", help="re-score the Hamming candidates with f")
    p.add_argument("--measure")
    p.add_argument("--items")

    p = sub.add_parser("eval", help="recall curves and radius-0 multi-table recall/FPR")
    p.add_argument("--index", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--test-users", required=True)
    p.add_argument("--measure", required=True)
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="sampling and loss ablations")
    p.add_argument("--users", required=True)
    p.add_argument("--test-users", required=True)
    p.add_argument("--items", required=True)
    p.add_argument("--measure", required=True)
    p.add_argument("--sampling", action="store_true")
    p.add_argument("--losses", action="store_true")
    p.add_argument("--seeds", type=_ints, default=(0, 1, 2))
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    return parser


def _cmd_gen_synth(a, stream):
    users, items, test = gen_synth(a.users, a.items, a.dim, a.seed, a.distribution, a.test_users, a.item_dim)
    out = Path(a.out)
    write_matrix(users, out / "users.flmx")
    write_matrix(items, out / "items.flmx")
    if test is not None:
        write_matrix(test, out / "test_users.flmx")


def _cmd_make_measure(a, stream):
    save_measure(make_measure(a.kind, a.user_dim, a.item_dim, a.seed, hidden=tuple(a.hidden)), a.out)


def _cmd_train(a, stream):
    users, items = _load_set(a.users, "user"), _load_set(a.items, "item")
    measure = load_measure(a.measure)
    config = _train_config(a)
    cache = prepare_cache(config, users, items, measure)
    if a.grid_u or a.grid_i:
        grid = grid_search_lambdas(config, users, items, measure,
                                   a.grid_u or (config.hash.lambda_u,), a.grid_i or (config.hash.lambda_i,),
                                   a.grid_iterations, cache)
        for lu, li, rec in grid.table:
            print(f"lambda_u={lu:g} lambda_i={li:g} val_recall={rec:.4f}", file=stream)
        lu, li = grid.best
        print(f"selected lambda_u={lu:g} lambda_i={li:g}", file=stream)
        config.hash.lambda_u, config.hash.lambda_i = lu, li
    result = train(config, users, items, measure, cache)
    save_model(result.model, a.out)
    if a.log:
        write_log_csv(result, a.log)
    print(f"best val recall@{config.val_t} {result.best_recall:.4f} at iteration {result.best_iteration}", file=stream)


def _cmd_build_index(a, stream):
    items = _load_set(a.items, "item")
    models = [load_model(p) for p in a.model]
    if a.seeds is not None and len(a.seeds) != len(models):
        raise InputError("--seeds needs one entry per --model")
    save_index(build_index(models, items, a.seeds), a.out)


def _cmd_query(a, stream):
    index = load_index(a.index)
    users = _load_set(a.users, "user")
    if not 0 <= a.user_row < len(users):
        raise InputError(f"--user-row must be in 0..{len(users) - 1}")
    if not 0 <= a.table < index.n_tables:
        raise InputError(f"--table must be in 0..{index.n_tables - 1}")
    user = users[a.user_row]
    model = index.models[a.table]
    q = pack_codes(encode_binary(model, "user", user[None, :])).words[0]
    result = rank_full_scan(q, index.codes[a.table], a.top)
    if a.rerank:
        if not (a.measure and a.items):
            raise InputError("--rerank needs --measure and --items")
        items = _load_set(a.items, "item")
        pool = rank_full_scan(q, index.codes[a.table], result.size_with_ties).ids
        result = rerank_with_f(pool, user, load_measure(a.measure), items, a.top)
    for i in result.ids:
        print(int(i), file=stream)


def _cmd_eval(a, stream):
    index = load_index(a.index)
    items = _load_set(a.items, "item")
    test = _load_set(a.test_users, "user")
    measure = load_measure(a.measure)
    gt = ground_truth(test, items, measure, a.K)
    out = Path(a.out)
    curves = {}
    curve = hamming_recall_curve(index.models[0], test, items, gt, a.T, method="flora")
    curve.write_csv(out / f"recall_K{a.K}.csv")
    curves["flora"] = curve
    if a.rerank:
        curve_r = reranked_recall_curve(index.models[0], test, items, measure, gt, a.T)
        curve_r.write_csv(out / f"recall_rerank_K{a.K}.csv")
        curves["flora-r"] = curve_r
    write_gnuplot(curves, out / f"recall_K{a.K}.dat")
    rows, _ = multitable_rows(index, test, gt, range(1, index.n_tables + 1))
    write_multitable_csv(rows, out / f"multitable_K{a.K}.csv")
    print(f"recall@{a.T} {curve.at(a.T):.4f}", file=stream)


def _cmd_ablate(a, stream):
    if not (a.sampling or a.losses):
        raise UsageError("ablate needs --sampling and/or --losses")
    users, items = _load_set(a.users, "user"), _load_set(a.items, "item")
    test = _load_set(a.test_users, "user")
    measure = load_measure(a.measure)
    config = _train_config(a)
    cache = prepare_cache(config, users, items, measure)
    gt = ground_truth(test, items, measure, a.K)
    out = Path(a.out)
    for kind, flag in (("sampling", a.sampling), ("losses", a.losses)):
        if not flag:
            continue
        runs = ablation(kind, config, users, items, test, measure, gt, a.seeds, cache=cache, T=a.T)
        curves = {}
        summary = io.StringIO()
        w = csv.writer(summary, lineterminator="\n")
        w.writerow(["variant", "seed", f"recall@{min(100, a.T)}", f"recall@{a.T}", "collapsed_bits"])
        for name, variant_runs in runs.items():
            curves[name] = mean_curve(variant_runs)
            curves[name].write_csv(out / f"{kind}_{name.replace('+', '_')}.csv")
            for r in variant_runs:
                w.writerow([name, r.seed, f"{r.curve.at(min(100, a.T)):.6g}", f"{r.curve.at(a.T):.6g}", r.collapsed])
        atomic_write(out / f"{kind}_summary.csv", summary.getvalue())
        write_gnuplot(curves, out / f"{kind}.dat")
        for name, c in curves.items():
            print(f"{kind} {name}: recall@{a.T} {c.at(a.T):.4f}", file=stream)


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = read_config(known.config)
    except OSError as exc:
        raise FormatError(f"cannot read config: {exc.strerror}", path=known.config) from exc
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in choices), None)
    if command is None:
        return
    subparser = choices[command]
    dests = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in values.items():
        action = dests.get(key)
        if action is None:
            raise UsageError(f"config key {key!r} is not an option of '{command}'")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [v.strip() for v in value.split(",")]
        else:
            defaults[key] = value
        action.required = False
    subparser.set_defaults(**defaults)


def main(argv=None, out=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    out = out or sys.stdout
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        a = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
        if a.command is None:
            raise UsageError(parser.format_usage().rstrip())
        {
            "query": _cmd_query,
            "gen-synth": _cmd_gen_synth,
            "make-measure": _cmd_make_measure,
            "train": _cmd_train,
            "build-index": _cmd_build_index,
            "eval": _cmd_eval,
            "ablate": _cmd_ablate,
        }[a.command](a, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (InputError, ConfigError) as exc:
        print(f"flora: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"flora: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"flora: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
