"""Command-line entry point: ``llmm <command> [flags]``.

Commands: generate, split, train, evaluate, explain, serialize-labs. Every
command writes a manifest next to its outputs echoing the resolved
configuration, the seed, package versions and the sha256 of every input and
output file.

A JSON ``--config`` file supplies defaults for any flag (keys are the flag
names with dashes or underscores); flags given on the command line win.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(including missing or malformed input files), 3 numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag defaults (flags win)")
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on numeric worker threads (sets the BLAS/OpenMP thread variables)")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="llmm", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"llmm {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic cohort file")
    g.add_argument("--out", required=True, help="cohort file to write (JSON lines)")
    g.add_argument("--n", type=int, default=None, help="number of patients (default 2000)")
    g.add_argument("--positive-rate", type=float, default=None, help="share of diabetic patients")
    g.add_argument("--missingness", type=float, default=None,
                   help="per-item probability that a lab item is not measured (default 0.3)")
    g.add_argument("--preset", default=None,
                   help="cohort-ratio preset: notes_history, labs_text_onset, text_plus_numeric")
    g.add_argument("--synth", default=None,
                   help="JSON object of further generator fields, e.g. "
                        '\'{"missingness_rate": {"Glucose AC": 0.0}}\'')
    _add_common(g)

    s = sub.add_parser("split", help="split a cohort by patient into train and test files")
    s.add_argument("--cohort", required=True)
    s.add_argument("--train-out", required=True)
    s.add_argument("--test-out", required=True)
    s.add_argument("--ratio", type=float, default=0.8, help="share of patients in train (default 0.8)")
    _add_common(s)

    t = sub.add_parser("train", help="train a model on a cohort file")
    t.add_argument("--cohort", required=True, help="training cohort file")
    t.add_argument("--out", required=True, help="checkpoint to write (.npz)")
    t.add_argument("--mode", default="fusion", help="fusion, text_only, labs_only or labs_text")
    t.add_argument("--task", default="binary", help="binary or multiclass")
    t.add_argument("--val-cohort", default=None,
                   help="validation cohort; default holds out --val-fraction of the training patients")
    t.add_argument("--val-fraction", type=float, default=0.2,
                   help="share of training patients held out for early stopping (0 disables)")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--onset-only", action="store_true",
                   help="keep only records up to a patient's initial diabetes onset")
    t.add_argument("--class-weighting", default="inverse_frequency",
                   help="none, inverse_frequency, oversample or undersample")
    t.add_argument("--model", default=None,
                   help='JSON object of model settings, e.g. \'{"d_model": 64, "n_layers": 1}\'')
    _add_common(t)

    e = sub.add_parser("evaluate", help="score a cohort with a trained model")
    e.add_argument("--model", required=True, help="checkpoint written by train")
    e.add_argument("--cohort", required=True)
    e.add_argument("--out", default=None, help="metrics report (default <model stem>.metrics.json)")
    e.add_argument("--probs", default=None,
                   help="per-record probability dump (default <report stem>.probs.jsonl)")
    e.add_argument("--task", default=None, help="defaults to the model's task")
    _add_common(e)

    x = sub.add_parser("explain", help="Shapley attributions for records of a cohort")
    x.add_argument("--model", required=True)
    x.add_argument("--cohort", required=True)
    x.add_argument("--out-dir", required=True, help="directory for <record>.json / <record>.html pairs")
    x.add_argument("--record", action="append", default=None,
                   help="record id (patient@date); repeatable; default: the first --limit records")
    x.add_argument("--limit", type=int, default=5)
    x.add_argument("--granularity", default="lab_item", help="lab_item or token")
    x.add_argument("--method", default="auto", help="auto, exact or sampled")
    x.add_argument("--exact-limit", type=int, default=12)
    x.add_argument("--n-samples", type=int, default=200)
    x.add_argument("--print", action="store_true", help="also print the terminal rendering")
    _add_common(x)

    z = sub.add_parser("serialize-labs", help="write each record's lab panel as Name:value text")
    z.add_argument("--cohort", required=True)
    z.add_argument("--out", required=True, help="JSON lines of {record_id, text}")
    z.add_argument("--order", default="panel", help="panel or alphabetical")
    _add_common(z)
    return parser


def _config_defaults(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    out = {}
    for key, value in cfg.items():
        if isinstance(value, (dict, list)) and key in ("synth", "model"):
            value = json.dumps(value)
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        defaults = _config_defaults(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            raise UsageError(f"{args.config}: unknown settings {unknown} for '{args.command}'")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_arg(text, flag) -> dict:
    if text is None:
        return {}
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag}: not valid JSON ({exc})") from None
    if not isinstance(value, dict):
        raise UsageError(f"{flag}: expected a JSON object")
    return value


def write_manifest(path, args: argparse.Namespace, inputs, outputs, extra=None) -> None:
    import numpy
    import scipy

    config = {k: v for k, v in sorted(vars(args).items())}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "versions": {"llmm": __version__, "python": platform.python_version(),
                     "numpy": numpy.__version__, "scipy": scipy.__version__},
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _stem(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext else path


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not os.path.isfile(p):
            raise FileNotFoundError(f"input file not found: {p}")


def _ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# commands


def cmd_generate(args) -> int:
    from .cohort import SynthConfig, generate_cohort, preset_config, write_cohort

    fields = _json_arg(args.synth, "--synth")
    for flag, key in (("n", "n_patients"), ("positive_rate", "positive_rate")):
        if getattr(args, flag) is not None:
            fields[key] = getattr(args, flag)
    if args.missingness is not None:
        extra = fields.get("missingness_rate")
        if isinstance(extra, dict):
            items = fields.get("panel_items") or SynthConfig().panel_items
            fields["missingness_rate"] = {n: extra.get(n, args.missingness) for n in items}
        else:
            fields["missingness_rate"] = args.missingness
    if "panel_items" in fields:
        fields["panel_items"] = tuple(fields["panel_items"])
    if "encounters_per_patient" in fields:
        fields["encounters_per_patient"] = tuple(fields["encounters_per_patient"])
    fields["seed"] = args.seed
    try:
        config = preset_config(args.preset, **fields) if args.preset else SynthConfig(**fields)
    except TypeError as exc:
        raise UsageError(f"--synth: {exc}") from None
    records = generate_cohort(config)
    _ensure_parent(args.out)
    write_cohort(records, args.out)
    write_manifest(_stem(args.out) + ".manifest.json", args, [], [args.out],
                   {"n_records": len(records)})
    print(f"wrote {len(records)} records to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .cohort import read_cohort, split_cohort, write_cohort

    _require_files(args.cohort)
    train, test = split_cohort(read_cohort(args.cohort), args.ratio, args.seed)
    for path, recs in ((args.train_out, train), (args.test_out, test)):
        _ensure_parent(path)
        write_cohort(recs, path)
    write_manifest(_stem(args.train_out) + ".manifest.json", args, [args.cohort],
                   [args.train_out, args.test_out])
    print(f"train {len(train)} records, test {len(test)} records")
    return EXIT_OK


def cmd_train(args) -> int:
    from .cohort import onset_records, read_cohort, split_cohort
    from .train import TrainConfig, train

    _require_files(args.cohort, args.val_cohort)
    config = TrainConfig(mode=args.mode, task=args.task, epochs=args.epochs,
                         batch_size=args.batch_size, lr=args.lr, patience=args.patience,
                         class_weighting=args.class_weighting, seed=args.seed,
                         model=_json_arg(args.model, "--model"))
    records = read_cohort(args.cohort)
    if args.onset_only:
        records = onset_records(records)
    inputs = [args.cohort]
    if args.val_cohort:
        val = read_cohort(args.val_cohort)
        if args.onset_only:
            val = onset_records(val)
        inputs.append(args.val_cohort)
    elif args.val_fraction > 0:
        records, val = split_cohort(records, 1.0 - args.val_fraction, args.seed)
    else:
        val = None
    result = train(records, val, config)
    _ensure_parent(args.out)
    result.model.save(args.out)
    history = _stem(args.out) + ".history.json"
    with open(history, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(result.history_json(), indent=2, sort_keys=True) + "\n")
    write_manifest(_stem(args.out) + ".manifest.json", args, inputs, [args.out, history],
                   {"train_config": {**vars(config)}, "best_epoch": result.best_epoch})
    print(f"trained {args.mode} for {len(result.history)} epochs (best {result.best_epoch}); "
          f"wrote {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .cohort import read_cohort
    from .fusion import FusionModel
    from .train import evaluate

    _require_files(args.model, args.cohort)
    model = FusionModel.load(args.model)
    ev = evaluate(model, read_cohort(args.cohort), args.task)
    out = args.out or _stem(args.model) + ".metrics.json"
    probs = args.probs or _stem(out) + ".probs.jsonl"
    _ensure_parent(out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(ev.report.dumps())
    ev.write_probabilities(probs)
    write_manifest(_stem(out) + ".manifest.json", args, [args.model, args.cohort], [out, probs])
    r = ev.report
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"n={r.n} accuracy={r.accuracy:.4f} precision={r.precision:.4f} recall={r.recall:.4f} "
          f"f1={r.f1:.4f} auroc={fmt(r.auroc)} auprc={fmt(r.auprc)}")
    return EXIT_OK


def _safe_name(record_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in record_id)


def cmd_explain(args) -> int:
    from .attribution import explain_record, render_terminal, write_report
    from .cohort import read_cohort
    from .errors import DataError
    from .fusion import FusionModel

    _require_files(args.model, args.cohort)
    model = FusionModel.load(args.model)
    records = read_cohort(args.cohort)
    if args.record:
        by_id = {r.record_id: r for r in records}
        missing = [rid for rid in args.record if rid not in by_id]
        if missing:
            raise DataError(f"records not in {args.cohort}: {missing}")
        chosen = [by_id[rid] for rid in args.record]
    else:
        chosen = records[: args.limit]
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    for rec in chosen:
        report = explain_record(model, rec, args.granularity, method=args.method,
                                exact_limit=args.exact_limit, n_samples=args.n_samples,
                                seed=args.seed)
        outputs.extend(write_report(report, os.path.join(args.out_dir, _safe_name(rec.record_id))))
        if args.print:
            sys.stdout.write(render_terminal(report))
    write_manifest(os.path.join(args.out_dir, "manifest.json"), args, [args.model, args.cohort],
                   outputs)
    print(f"wrote {len(chosen)} attribution reports to {args.out_dir}")
    return EXIT_OK


def cmd_serialize_labs(args) -> int:
    from .cohort import read_cohort
    from .textualize import SerializationSpec, serialize_panel

    _require_files(args.cohort)
    spec = SerializationSpec(item_order=args.order)
    _ensure_parent(args.out)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for rec in read_cohort(args.cohort):
            fh.write(json.dumps({"record_id": rec.record_id,
                                 "text": serialize_panel(rec.panel, spec)}) + "\n")
    write_manifest(_stem(args.out) + ".manifest.json", args, [args.cohort], [args.out])
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "serialize-labs": cmd_serialize_labs,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    import logging

    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    from .errors import ConfigError, DataError, NumericError

    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return EXIT_USAGE
    except NumericError as exc:
        sys.stderr.write(f"numeric error: {exc}\n")
        return EXIT_NUMERIC
    except (DataError, ValueError, FileNotFoundError, KeyError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
