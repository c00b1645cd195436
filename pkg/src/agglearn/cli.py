"""Command-line entry point: generate, aggregate, train, predict, evaluate, sweep.

Every command accepts ``--config FILE`` holding flat ``key=value`` lines
(keys are long option names, dashes or underscores); explicit flags win.
The resolved configuration is echoed as ``run.cfg`` next to the outputs.

Exit codes: 0 success, 2 usage or config error, 3 data or contract error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .agg_logistic import (TrainConfig, generate_fake_granular, predict, read_model, train,
                           write_model)
from .aggregation import (_fmt, build_report, calibrate_sigma, l2_sensitivity, read_report,
                          write_meta, write_report)
from .data import (ColumnMap, SyntheticSpec, generate_synthetic, load_granular_csv, read_vocab,
                   write_granular_csv, write_vocab)
from .encoding import FeatureIndexMap, HashedEncoder, HashedEncoderConfig
from .enrichment import (EnrichConfig, compute_ctr_table, enrich, predict_enriched,
                         read_ctr_table, read_enriched_model, train_enriched, write_ctr_table,
                         write_enriched_model)
from .errors import AggLearnError, DivergenceError
from .evaluation import CLIP_EPSILON, bootstrap_compare, nce, skyline_degradation, write_eval
from .experiments import SWEEP_KINDS, Scenario, run_sweep, write_sweep_csv
from .skyline import dummy_model, train_skyline

log = logging.getLogger("agglearn")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# parsing helpers


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def read_config_file(path):
    """Flat ``key=value`` file; ``#`` starts a comment line."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _column_map(args):
    if not args.features:
        return ColumnMap([c for c in _names_from_header(args.input)
                          if c not in (args.click_column, args.sale_column)],
                         args.click_column, args.sale_column)
    return ColumnMap(_names(args.features), args.click_column, args.sale_column)


def _names_from_header(path):
    return list(pd.read_csv(path, nrows=0, dtype=str).columns)


def _labels(path, column):
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False,
                        usecols=lambda c: c == column)
    if column not in frame.columns:
        raise AggLearnError(f"missing label column {column!r} in {path}")
    try:
        y = frame[column].astype(np.int64).to_numpy()
    except ValueError:
        raise AggLearnError(f"{path}: labels in {column!r} must be 0 or 1")
    if np.any((y != 0) & (y != 1)):
        raise AggLearnError(f"{path}: labels in {column!r} must be 0 or 1")
    return y


def _read_predictions(path):
    frame = pd.read_csv(path)
    if list(frame.columns) != ["row_index", "probability"]:
        raise AggLearnError(f"{path}: expected header row_index,probability")
    return frame["probability"].to_numpy(dtype=np.float64)


def _write_predictions(path, p):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_index", "probability"])
        for i, v in enumerate(np.asarray(p).tolist()):
            w.writerow([i, _fmt(v)])


def _echo_config(args, out_dir):
    items = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    write_meta(Path(out_dir) / "run.cfg",
               {k: ",".join(map(str, v)) if isinstance(v, list) else v for k, v in items.items()})


def _write_history(model, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "objective", "grad_norm"])
        for h in model.history:
            w.writerow([h["iteration"], _fmt(h["objective"]), _fmt(h["grad_norm"])])


def _encoder(args, schema):
    if args.hashed_p:
        return HashedEncoder(schema, HashedEncoderConfig(args.hashed_p, args.hash_salt))
    return FeatureIndexMap(schema.cardinality)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(args.cardinalities, args.rows, marginal_skew=args.skew,
                         true_weight_density=args.density, base_rate=args.base_rate,
                         seed=args.model_seed, weight_scale=args.weight_scale)
    data, _, schema = generate_synthetic(spec, seed=args.seed)
    write_granular_csv(data, schema, out / args.name)
    _echo_config(args, out)


def cmd_aggregate(args):
    out = Path(args.out_dir)
    data, schema = load_granular_csv(args.input, _column_map(args))
    encoder = _encoder(args, schema)
    extra = {}
    if args.epsilon is not None or args.delta is not None:
        if args.epsilon is None or args.delta is None:
            raise UsageError("--epsilon and --delta go together")
        metrics = 1 if args.reparameterize else 3
        delta_2 = l2_sensitivity(encoder.num_tables, 3, args.reparameterize)
        sigma = calibrate_sigma(args.epsilon, args.delta, delta_2)
        extra = {"epsilon": _fmt(args.epsilon), "delta": _fmt(args.delta),
                 "l2_sensitivity": _fmt(delta_2), "metrics_per_line": metrics}
    else:
        sigma = args.sigma
    report = build_report(data, encoder, threshold=args.threshold, sigma=sigma, seed=args.seed,
                          reparameterized=args.reparameterize)
    write_report(report, schema, out)
    if extra:
        with open(out / "report.meta", "a", encoding="utf-8", newline="\n") as fh:
            for k, v in extra.items():
                fh.write(f"{k}={v}\n")
    _echo_config(args, out)


def _train_config(args):
    return TrainConfig(optimizer=args.optimizer, step_size=args.step_size, l2=args.l2,
                       l1=args.l1, num_iterations=args.iterations, rescaling=args.rescaling,
                       raw_count_estimate=args.raw_count, label=args.label, seed=args.seed)


def cmd_train(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.method == "skyline":
        if not args.granular:
            raise UsageError("skyline needs --granular (labeled rows)")
        cols = ColumnMap(_names(args.features)) if args.features else None
        data, schema = load_granular_csv(args.granular, cols)
        model = train_skyline(data, data.labels(args.label), _encoder(args, schema),
                              _train_config(args))
        write_model(model, schema, out)
        _write_history(model, out / "train.log.csv")
    elif args.method == "dummy":
        if not args.granular:
            raise UsageError("dummy needs --granular (labeled rows)")
        data, schema = load_granular_csv(args.granular)
        model = dummy_model(data.labels(args.label), _encoder(args, schema))
        write_model(model, schema, out)
    else:
        if not args.report:
            raise UsageError(f"{args.method} needs --report")
        report, schema = read_report(args.report)
        if args.method == "fake":
            rows = generate_fake_granular(report, args.num_fake, seed=args.seed)
            model = train(report, rows, _train_config(args))
            model.meta["method"] = "fake"
            model.meta["num_fake"] = args.num_fake
            write_model(model, schema, out)
            _write_history(model, out / "train.log.csv")
        elif args.method == "agglogistic":
            if not args.granular:
                raise UsageError("agglogistic needs --granular (unlabeled rows)")
            data, _ = _load_frozen(args.granular, schema, labeled=False)
            model = train(report, data.features, _train_config(args))
            write_model(model, schema, out)
            _write_history(model, out / "train.log.csv")
        else:
            _train_enrich(args, report, schema, out)
    _echo_config(args, out)


def _load_frozen(path, schema, labeled=True):
    """Granular CSV read against a fixed vocabulary; unseen values become OOV."""
    return load_granular_csv(path, ColumnMap(list(schema.feature_names)), schema=schema,
                             extend=False, labeled=labeled)


def _train_enrich(args, report, schema, out):
    if not args.granular:
        raise UsageError("enrich needs --granular (labeled rows)")
    data, _ = _load_frozen(args.granular, schema)
    valid = _load_frozen(args.validation, schema)[0] if args.validation else None
    cfg = EnrichConfig(l2=args.enrich_l2, seed=args.seed)
    weights = args.prior_weight
    if not weights:
        raise UsageError("--prior-weight needs at least one value")
    scores = []
    for w in weights:
        table = compute_ctr_table(report, args.label, w)
        model = train_enriched(enrich(data, table, args.include_counts),
                               schema.cardinality, cfg)
        model.meta["prior_weight"] = _fmt(w)
        target = out if len(weights) == 1 else out / f"w_{_fmt(w)}"
        write_enriched_model(model, target)
        write_ctr_table(table, target)
        write_vocab(schema, target / "vocab.csv")
        if valid is not None:
            p = predict_enriched(model, enrich(valid, table, args.include_counts, labeled=False))
            r = nce(p, valid.labels(args.label))
            scores.append((w, r.log_loss, r.nce))
    if scores:
        with open(out / "validation.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["prior_weight", "log_loss", "nce"])
            for w, loss, score in scores:
                wr.writerow([_fmt(w), _fmt(loss), _fmt(score)])
        if len(weights) > 1:
            best = max(scores, key=lambda t: (t[2], -t[0]))[0]
            src = out / f"w_{_fmt(best)}"
            for name in ("model.csv", "model.meta", "ctr.csv", "ctr.meta", "vocab.csv"):
                (out / name).write_bytes((src / name).read_bytes())


def _predict_dir(model_dir, input_path):
    model_dir = Path(model_dir)
    meta_path = model_dir / "model.meta"
    if not meta_path.exists():
        raise AggLearnError(f"no model.meta in {model_dir}")
    schema = read_vocab(model_dir / "vocab.csv")
    data, _ = _load_frozen(input_path, schema, labeled=False)
    if (model_dir / "ctr.csv").exists():
        model = read_enriched_model(model_dir)
        table = read_ctr_table(model_dir, schema)
        return predict_enriched(model, enrich(data, table, model.include_counts, labeled=False))
    model, _ = read_model(model_dir)
    return predict(model, data)


def cmd_predict(args):
    p = _predict_dir(args.model, args.input)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _write_predictions(args.out, p)


def cmd_evaluate(args):
    p = _read_predictions(args.predictions)
    y = _labels(args.labels, args.label)
    result = nce(p, y, args.clip_epsilon)
    extra = {}
    if args.skyline_loss is not None:
        extra["vs_skyline_percent"] = skyline_degradation(result.log_loss, args.skyline_loss)
    if args.against:
        if not args.bootstrap:
            raise UsageError("--against needs --bootstrap N")
        delta, pval = bootstrap_compare(p, _read_predictions(args.against), y, args.bootstrap,
                                        args.seed, args.clip_epsilon)
        extra.update({"loss_delta": delta, "p_value": pval, "num_bootstraps": args.bootstrap})
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_eval(args.out, result, extra)


def cmd_sweep(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = Scenario(cardinalities=tuple(args.cardinalities), num_raw=args.raw_rows,
                        num_test=args.test_rows, num_granular=args.granular_rows,
                        granular_source=args.granular_source, weight_scale=args.weight_scale,
                        base_rate=args.base_rate, sigma=args.sigma, threshold=args.threshold,
                        hashed_p=args.hashed_p, hash_salt=args.hash_salt,
                        l2_grid=tuple(args.l2_grid), prior_weights=tuple(args.prior_weights),
                        enrich_l2=args.enrich_l2, num_iterations=args.iterations,
                        label=args.label, methods=tuple(args.methods))
    grid = args.grid
    if not grid or not args.seeds:
        raise UsageError("--grid and --seeds need at least one value")
    if args.kind == "granular-size":
        grid = [int(v) for v in grid]
    rows = run_sweep(args.kind, grid, args.seeds, scenario, workers=args.workers)
    write_sweep_csv(rows, out / "sweep.csv")
    _echo_config(args, out)


# ---------------------------------------------------------------------------
# parser


def _add_encoder_flags(p):
    p.add_argument("--hashed-p", type=int, default=0,
                   help="hash K(x) into this many coordinates (0: exact encoder)")
    p.add_argument("--hash-salt", type=int, default=0)


def _add_train_flags(p):
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--optimizer", choices=["precond", "adam"], default="precond")
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--label", choices=["click", "sale"], default="click")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="agglearn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic granular CSV")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--name", default="granular.csv")
    p.add_argument("--cardinalities", type=_ints, default=[8, 12, 20, 30, 50])
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--model-seed", type=int, default=0, help="seed of the true model")
    p.add_argument("--seed", type=int, default=None, help="row-draw seed (default: model seed)")
    p.add_argument("--base-rate", type=float, default=0.1)
    p.add_argument("--weight-scale", type=float, default=1.0)
    p.add_argument("--skew", type=float, default=1.1)
    p.add_argument("--density", type=float, default=0.3)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("aggregate", help="build a (noisy) aggregation report")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--features", "--feature-columns", default="",
                   help="comma-separated feature columns (default: all but the labels)")
    p.add_argument("--click-column", default="click")
    p.add_argument("--sale-column", default="sale")
    p.add_argument("--sigma", type=float, default=17.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--threshold", type=int, default=10)
    p.add_argument("--reparameterize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("train", help="fit a model")
    p.add_argument("--method", choices=["agglogistic", "enrich", "skyline", "fake", "dummy"],
                   required=True)
    p.add_argument("--report", default="")
    p.add_argument("--granular", default="", help="granular CSV (unlabeled for agglogistic)")
    p.add_argument("--validation", default="", help="labeled CSV to rank prior weights")
    p.add_argument("--features", "--feature-columns", default="")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rescaling", choices=["coordinate", "global"], default="coordinate")
    p.add_argument("--raw-count", type=float, default=None)
    p.add_argument("--prior-weight", type=_floats, default=[0.0])
    p.add_argument("--enrich-l2", type=float, default=1.0)
    p.add_argument("--include-counts", action="store_true")
    p.add_argument("--num-fake", type=int, default=100_000)
    _add_train_flags(p)
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a granular CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="log-loss / NCE of a predictions file")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True, help="CSV with the label column")
    p.add_argument("--label", default="click")
    p.add_argument("--out", required=True)
    p.add_argument("--clip-epsilon", type=float, default=CLIP_EPSILON)
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--against", default="")
    p.add_argument("--skyline-loss", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="synthetic experiment sweep to sweep.csv")
    p.add_argument("--kind", choices=sorted(SWEEP_KINDS), required=True)
    p.add_argument("--grid", type=_floats, required=True)
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--methods", type=_names, default=["agglogistic", "enrich"])
    p.add_argument("--cardinalities", type=_ints, default=[8, 12, 20, 30, 50])
    p.add_argument("--raw-rows", type=int, default=200_000)
    p.add_argument("--test-rows", type=int, default=50_000)
    p.add_argument("--granular-rows", type=int, default=20_000)
    p.add_argument("--granular-source", choices=["fresh", "raw", "test"], default="fresh")
    p.add_argument("--weight-scale", type=float, default=1.0)
    p.add_argument("--base-rate", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=17.0)
    p.add_argument("--threshold", type=int, default=10)
    p.add_argument("--l2-grid", type=_floats, default=[4.0, 16.0, 64.0, 256.0, 1024.0, 4096.0])
    p.add_argument("--prior-weights", type=_floats, default=[1.0, 10.0, 100.0, 1000.0])
    p.add_argument("--enrich-l2", type=float, default=10.0)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--label", choices=["click", "sale"], default="click")
    _add_encoder_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def parse_args(argv):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, rest = pre.parse_known_args(argv)
    if known.config:
        cfg = read_config_file(known.config)
        # config values go in as if typed on the command line, so flags given later win
        sub = next((a for a in rest if not a.startswith("-")), None)
        if sub is None:
            raise UsageError("missing subcommand")
        subparser = parser._subparsers._group_actions[0].choices.get(sub)
        if subparser is None:
            raise UsageError(f"unknown subcommand {sub!r}")
        options = {a.dest: a for a in subparser._actions if a.option_strings}
        for a in subparser._actions:
            for flag in a.option_strings:
                if flag.startswith("--"):
                    options.setdefault(flag[2:].replace("-", "_"), a)
        injected = []
        for key, value in cfg.items():
            action = options.get(key)
            if action is None:
                raise UsageError(f"unknown config key {key!r} for {sub}")
            flag = action.option_strings[-1]
            if isinstance(action, argparse._StoreTrueAction):
                if value.lower() in ("1", "true", "yes"):
                    injected.append(flag)
                elif value.lower() not in ("0", "false", "no"):
                    raise UsageError(f"config key {key!r} expects a boolean")
            else:
                injected += [flag, value]
        i = rest.index(sub) + 1
        rest = rest[:i] + injected + rest[i:]
    args = parser.parse_args(rest)
    args.config = known.config
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"agglearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"agglearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"agglearn: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (AggLearnError, ValueError, OSError, KeyError) as exc:
        print(f"agglearn: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
