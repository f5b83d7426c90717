"""``mpdr`` command-line entry point.

Every command resolves its configuration, writes a JSON run manifest next
to its primary output, then computes. ``mpdr replay <manifest>`` re-runs
a manifest and reproduces every listed output byte for byte.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mpdr import __version__, losses
from mpdr.data import (Regime, SynthConfig, Tier, atomic_write, generate, load_dataset,
                       save_dataset, subset_queries, tier_view, truncate_positives)
from mpdr.encoder import EncoderParams, init_params
from mpdr.errors import MPDRError, UsageError
from mpdr.losses import MAIN_OBJECTIVES, ObjectiveKind
from mpdr.metrics import MetricsReport, compare_reports, evaluate_model, resolve_metrics
from mpdr.oracle import gradcheck
from mpdr.trainer import PRESETS, curriculum_train, preset, save_checkpoint, stage2_config, train

log = logging.getLogger("mpdr")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2

#: (positives per query, nominal query fraction) of the fixed-budget settings
BUDGET_SETTINGS = ((1, 1.0), (2, 1 / 2), (3, 1 / 3), (4, 1 / 4))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# flag helpers

def _int_list(text):
    try:
        values = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _objective(text):
    try:
        return ObjectiveKind.parse(text)
    except UsageError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def resolve_seed(flag):
    """``--seed`` if given, else ``MPDR_SEED``, else 0."""
    if flag is not None:
        seed = flag
    else:
        raw = os.environ.get("MPDR_SEED")
        if raw is None or raw.strip() == "":
            return 0
        try:
            seed = int(raw)
        except ValueError:
            raise UsageError(f"MPDR_SEED must be an integer, got {raw!r}") from None
    if not 0 <= seed < 2 ** 63:
        raise UsageError(f"seed must lie in [0, 2^63), got {seed}")
    return seed


def _fmt_csv_row(values):
    return ",".join(v if isinstance(v, str) else repr(v) for v in values) + "\n"


def _print_rows(header, rows):
    width = [max(len(str(h)), *(len(_cell(r[i])) for r in rows)) if rows else len(str(h))
             for i, h in enumerate(header)]
    print("  ".join(f"{h:>{w}}" for h, w in zip(header, width)))
    for r in rows:
        print("  ".join(f"{_cell(v):>{w}}" for v, w in zip(r, width)))


def _cell(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# --------------------------------------------------------------------------
# manifest

def manifest_path(args, primary) -> Path:
    return Path(args.manifest) if args.manifest else Path(f"{primary}.manifest.json")


def write_manifest(args, argv, config, seed, outputs, primary):
    """Write the run manifest before any output; returns its path."""
    resolved = list(argv)
    if "--seed" not in resolved and seed is not None and args.command != "replay":
        resolved += ["--seed", str(seed)]
    manifest = {
        "command": args.command,
        "argv": resolved,
        "config": config,
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "backend": losses.backend(),
        "tool_version": __version__,
    }
    path = manifest_path(args, primary)
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# --------------------------------------------------------------------------
# commands

def cmd_synth(args, argv):
    seed = resolve_seed(args.seed)
    config = SynthConfig(num_queries=args.queries, corpus_size=args.corpus_size,
                         input_dim=args.input_dim, positives_per_query=args.positives,
                         hard_negatives_per_query=args.hard_negatives,
                         regime=Regime(args.regime), seed=seed)
    config.validate()
    outputs = [args.out] + ([args.human_out] if args.human_out else [])
    resolved = {"num_queries": config.num_queries, "corpus_size": config.corpus_size,
                "input_dim": config.input_dim, "positives": str(config.positives_per_query),
                "hard_negatives": config.hard_negatives_per_query, "regime": config.regime.value}
    write_manifest(args, argv, resolved, seed, outputs, args.out)
    corpus = generate(config)
    save_dataset(corpus, args.out)
    if args.human_out:
        if config.regime is not Regime.HETEROGENEOUS:
            log.warning("--human-out on a homogeneous corpus: no Human positives, writing an empty query set")
        save_dataset(tier_view(corpus, Tier.HUMAN), args.human_out)
    counts = [len(q.positives) for q in corpus.queries]
    print(f"wrote {args.out}: {corpus.size} documents, {len(corpus.queries)} queries, "
          f"{np.mean(counts) if counts else 0.0:.2f} positives/query ({config.regime.value})")
    return EXIT_OK


def _train_config(args, seed):
    overrides = {"seed": seed}
    for flag, key in (("objective", "objective"), ("epochs", "epochs"), ("batch", "batch_size"),
                      ("lr", "learning_rate"), ("group_size", "G"), ("max_pos", "M"), ("scale", "scale")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    config = preset(args.preset, **overrides)
    config.validate()
    return config


def _initial_params(args, input_dim, seed):
    if getattr(args, "init", None):
        params = EncoderParams.load(args.init)
        if params.input_dim != input_dim:
            raise UsageError(f"--init has input_dim {params.input_dim}, dataset has {input_dim}")
        return params
    return init_params(input_dim, args.embed_dim, seed)


def cmd_train(args, argv):
    seed = resolve_seed(args.seed)
    config = _train_config(args, seed)
    if args.curriculum and not args.stage2_data:
        raise UsageError("--curriculum needs --stage2-data")
    if args.stage2_data and not args.curriculum:
        raise UsageError("--stage2-data is only used with --curriculum")
    log_path = args.log or f"{args.out}.log.csv"
    outputs = [args.out, f"{args.out}.config", log_path]
    resolved = {k: (v.value if isinstance(v, ObjectiveKind) else v)
                for k, v in vars(config).items()}
    resolved.update(preset=args.preset, curriculum=bool(args.curriculum), embed_dim=args.embed_dim)
    if args.curriculum:
        resolved["stage2_epochs"] = args.stage2_epochs
    corpus = load_dataset(args.data)
    stage2 = load_dataset(args.stage2_data) if args.curriculum else None
    params = _initial_params(args, corpus.input_dim, seed)
    write_manifest(args, argv, resolved, seed, outputs, args.out)

    if args.curriculum:
        params, train_log = curriculum_train(corpus, stage2, params, config,
                                             stage2_config(config, args.stage2_epochs))
    else:
        params, train_log = train(corpus, params, config)
    save_checkpoint(params, config, args.out)
    atomic_write(log_path, train_log.to_csv(timing=args.timing))
    rows = [(r.epoch, r.stage, r.mean_loss, f"{r.wall_ms:.1f}") for r in train_log.records]
    if rows:
        _print_rows(("epoch", "stage", "mean_loss", "wall_ms"), rows)
    print(f"wrote {args.out} ({config.objective}, {len(train_log)} epochs)")
    return EXIT_OK


def cmd_eval(args, argv):
    outputs = [args.out]
    compare_out = f"{args.out}.compare.csv" if args.compare else None
    if compare_out:
        outputs.append(compare_out)
    config = {"model": str(args.model), "data": str(args.data),
              "cutoffs": args.cutoffs, "compare": args.compare, "scale": args.scale}
    params = EncoderParams.load(args.model)
    corpus = load_dataset(args.data)
    if not corpus.queries:
        raise UsageError(f"{args.data} has no queries to evaluate")
    other = MetricsReport.from_csv(Path(args.compare).read_text(encoding="utf-8")) if args.compare else None
    write_manifest(args, argv, config, None, outputs, args.out)
    report = evaluate_model(params, corpus, cutoffs=args.cutoffs, scale=args.scale)
    atomic_write(args.out, report.to_csv())
    print(report.to_table())
    if other is not None:
        comparisons = compare_reports(report, other)
        buf = io.StringIO()
        buf.write("metric,mean_a,mean_b,t_statistic,p_value,mark\n")
        for c in comparisons:
            buf.write(_fmt_csv_row([c.metric, c.mean_a, c.mean_b, c.t_statistic, c.p_value, c.mark]))
        atomic_write(compare_out, buf.getvalue())
        print()
        _print_rows(("metric", "this", "other", "t", "p", "sig"),
                    [(c.metric, c.mean_a, c.mean_b, c.t_statistic, c.p_value, c.mark) for c in comparisons])
    return EXIT_OK


def cmd_gradcheck(args, argv):
    seed = resolve_seed(args.seed)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if not args.tol > 0:
        raise UsageError("--tol must be positive")
    config = {"trials": args.trials, "tol": args.tol, "step": args.step,
              "max_pos": args.max_pos, "max_neg": args.max_neg}
    write_manifest(args, argv, config, seed, [args.out], args.out)
    report = gradcheck(trials=args.trials, seed=seed, step=args.step,
                       max_pos=args.max_pos, max_neg=args.max_neg)
    atomic_write(args.out, report.to_csv())
    print(report.to_table())
    if not report.passed(args.tol):
        print(f"FAIL: max relative error {report.max_relative_error:.3e} >= tol {args.tol:g}")
        return EXIT_NUMERICAL
    print(f"PASS: max relative error {report.max_relative_error:.3e} < tol {args.tol:g}")
    return EXIT_OK


def _metric_names(corpus, cutoffs):
    return [f"{fam}@{k}" for fam, k in resolve_metrics(corpus.size, cutoffs=cutoffs)]


def cmd_ablate(args, argv):
    seed = resolve_seed(args.seed)
    objectives = args.objectives or list(MAIN_OBJECTIVES)
    cells = []
    for G in args.G:
        for M in args.M:
            if M >= G:
                log.warning("skipping G=%d, M=%d: need M < G", G, M)
                continue
            cells.append((G, M))
    config = {"objectives": [o.value for o in objectives], "G": args.G, "M": args.M,
              "preset": args.preset, "epochs": args.epochs, "cutoffs": args.cutoffs,
              "embed_dim": args.embed_dim, "eval_data": args.eval_data}
    corpus = load_dataset(args.data)
    eval_corpus = load_dataset(args.eval_data) if args.eval_data else corpus
    names = _metric_names(eval_corpus, args.cutoffs)
    init = init_params(corpus.input_dim, args.embed_dim, seed)
    write_manifest(args, argv, config, seed, [args.out], args.out)
    rows = []
    for objective in objectives:
        for G, M in cells:
            overrides = {"objective": objective, "G": G, "M": M, "seed": seed}
            if args.epochs is not None:
                overrides["epochs"] = args.epochs
            params, _ = train(corpus, init, preset(args.preset, **overrides))
            report = evaluate_model(params, eval_corpus, cutoffs=args.cutoffs)
            rows.append([objective.value, G, M] + [report.aggregate[n] for n in names])
            log.info("ablate %s G=%d M=%d done", objective.value, G, M)
    buf = io.StringIO()
    buf.write(",".join(["objective", "G", "M"] + names) + "\n")
    for row in rows:
        buf.write(_fmt_csv_row([row[0], str(row[1]), str(row[2])] + row[3:]))
    atomic_write(args.out, buf.getvalue())
    _print_rows(["objective", "G", "M"] + names, rows)
    return EXIT_OK


def budget_subset(query_ids, fraction, seed, setting):
    """Uniform sample without replacement of round(fraction * n) queries, corpus order kept."""
    n = len(query_ids)
    size = max(1, int(round(fraction * n)))
    rng = np.random.default_rng([seed, setting])
    picked = np.sort(rng.choice(n, size=size, replace=False))
    return [query_ids[i] for i in picked]


def cmd_budget(args, argv):
    seed = resolve_seed(args.seed)
    if len(args.epochs) != len(BUDGET_SETTINGS):
        raise UsageError(f"--epochs needs {len(BUDGET_SETTINGS)} values, got {len(args.epochs)}")
    config = {"epochs": args.epochs, "full_epochs": args.full_epochs, "preset": args.preset,
              "cutoffs": args.cutoffs, "embed_dim": args.embed_dim, "eval_data": args.eval_data}
    corpus = load_dataset(args.data)
    eval_corpus = load_dataset(args.eval_data) if args.eval_data else corpus
    names = _metric_names(eval_corpus, args.cutoffs)
    init = init_params(corpus.input_dim, args.embed_dim, seed)
    write_manifest(args, argv, config, seed, [args.out], args.out)
    ids = [q.query_id for q in corpus.queries]
    fewest = min((len(q.positives) for q in corpus.queries), default=0)
    plan = [(m, frac, epochs, i + 1) for i, ((m, frac), epochs) in enumerate(zip(BUDGET_SETTINGS, args.epochs))]
    plan.append((BUDGET_SETTINGS[-1][0], 1.0, args.full_epochs, 0))
    rows = []
    for m, fraction, epochs, setting in plan:
        if fewest < m:
            log.warning("skipping budget setting m=%d: some queries have only %d positives", m, fewest)
            continue
        chosen = ids if fraction == 1.0 else budget_subset(ids, fraction, seed, setting)
        sub = truncate_positives(subset_queries(corpus, chosen), m)
        # M must stay below G; with m positives the group needs m slots
        config_m = preset(args.preset, objective=ObjectiveKind.LSE_PAIR, epochs=epochs, seed=seed, M=m,
                          G=max(PRESETS[args.preset]["G"], m + 1))
        params, _ = train(sub, init, config_m)
        report = evaluate_model(params, eval_corpus, cutoffs=args.cutoffs)
        rows.append([m, fraction, len(chosen), m * len(chosen), epochs]
                    + [report.aggregate[n] for n in names])
    buf = io.StringIO()
    buf.write(",".join(["positive_count", "query_count_ratio", "query_count", "label_count", "epochs"]
                       + names) + "\n")
    for row in rows:
        buf.write(_fmt_csv_row([str(row[0]), row[1], str(row[2]), str(row[3]), str(row[4])] + row[5:]))
    atomic_write(args.out, buf.getvalue())
    _print_rows(["m", "QCR", "queries", "labels", "epochs"] + names, rows)
    return EXIT_OK


def cmd_replay(args, argv):
    try:
        manifest = json.loads(Path(args.manifest_file).read_text(encoding="utf-8"))
        stored = manifest["argv"]
        wanted_backend = manifest["backend"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest_file}: {exc}") from None
    if manifest.get("tool_version") != __version__:
        log.warning("manifest written by version %s, running %s", manifest.get("tool_version"), __version__)
    previous = losses.set_backend(wanted_backend)
    try:
        return main(stored)
    finally:
        losses.set_backend(previous)


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpdr", description="Multi-positive dense retrieval toolkit.")
    parser.add_argument("--version", action="version", version=f"mpdr {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
        if seed:
            p.add_argument("--seed", type=int, help="RNG seed (default: $MPDR_SEED, else 0)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--regime", choices=[r.value for r in Regime], default=Regime.HOMOGENEOUS.value)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--corpus-size", type=int, default=5000)
    p.add_argument("--positives", default="2-8", help="N, LO-HI, 5.5-avg or 6.5-avg")
    p.add_argument("--input-dim", type=int, default=32)
    p.add_argument("--hard-negatives", type=int, default=16)
    p.add_argument("--human-out", help="also write the Human-positive view (curriculum stage 2)")
    common(p)

    p = sub.add_parser("train", help="train an encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--objective", type=_objective)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--group-size", type=int, help="G, passages per query group")
    p.add_argument("--max-pos", type=int, help="M, positives per group")
    p.add_argument("--scale", type=float)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--init", help="start from this checkpoint instead of a seeded init")
    p.add_argument("--curriculum", action="store_true")
    p.add_argument("--stage2-data")
    p.add_argument("--stage2-epochs", type=int, default=1)
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--timing", action="store_true",
                   help="record wall_ms in the log (the log is then not reproducible)")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--cutoffs", type=_int_list)
    p.add_argument("--compare", help="metrics CSV to test against (paired t-test)")
    p.add_argument("--scale", type=float, default=1.0)
    common(p, seed=False)

    p = sub.add_parser("gradcheck", help="check analytic gradients against finite differences")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--max-pos", type=int, default=8)
    p.add_argument("--max-neg", type=int, default=16)
    p.add_argument("--out", default="gradcheck.csv")
    common(p)

    for name, helptext in (("ablate", "positive/negative ratio grid"), ("budget", "fixed label-budget settings")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--eval-data", help="dataset to evaluate on (default: --data)")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--cutoffs", type=_int_list)
        p.add_argument("--embed-dim", type=int, default=16)
        common(p)
        if name == "ablate":
            p.add_argument("--G", type=_int_list, default=[8, 16])
            p.add_argument("--M", type=_int_list, default=[2, 4, 8])
            p.add_argument("--objectives", type=lambda s: [_objective(t) for t in s.split(",")])
            p.add_argument("--epochs", type=int)
        else:
            p.add_argument("--epochs", type=_int_list, default=[3, 4, 5, 5])
            p.add_argument("--full-epochs", type=int, default=3,
                           help="epochs for the unconstrained row (all queries, 4 positives)")

    p = sub.add_parser("replay", help="re-run a manifest")
    p.add_argument("manifest_file")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "budget": cmd_budget, "replay": cmd_replay}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    sub_argv = argv[argv.index(args.command) + 1:]
    try:
        return COMMANDS[args.command](args, [args.command] + sub_argv)
    except ArithmeticError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (MPDRError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
