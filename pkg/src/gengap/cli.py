"""Command line entry point.

    gengap gen-datasets --preset desk --out data/
    gengap sample-hparams --count 20 --seed 0
    gengap train-nets --preset desk --out runs/desk --workers 8
    gengap extract-signatures --run runs/desk --lambda 1.0
    gengap train-ggp --run runs/desk --family rnn --scope single-model --out rnn.json
    gengap evaluate --run runs/desk --scope per-dataset --regime same-dist --family linear
    gengap export-analysis --run runs/desk --out analysis.csv --svg-dir plots/
    gengap report --run runs/desk
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from gengap import evalkit, ggp, pipeline, spiral_gen

log = logging.getLogger("gengap")


class CliError(Exception):
    pass


def _dash(name: str) -> str:
    return name.replace("_", "-")


def _run_dir(path: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"run directory not found: {p}")
    if not (p / pipeline.RECORDS_FILE).exists():
        raise CliError(f"no {pipeline.RECORDS_FILE} in {p}")
    return p


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands

def cmd_gen_datasets(args) -> int:
    if args.spec:
        specs = [spiral_gen.SpiralSpec.parse(s) for s in args.spec]
    else:
        specs = pipeline.preset_config(args.preset).specs()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        stem = f"k{spec.loops}_s{spec.noise_sigma:g}_m{spec.num_train}_seed{spec.data_seed}"
        spiral_gen.write_jsonl(spiral_gen.generate(spec), out / f"{stem}.train.jsonl")
        if args.test_size:
            test = spiral_gen.generate(spec, args.test_size, "test")
            spiral_gen.write_jsonl(test, out / f"{stem}.test.jsonl", "test")
    print(f"wrote {len(specs)} dataset(s) to {out}")
    return 0


def cmd_sample_hparams(args) -> int:
    lines = [json.dumps(hp.to_dict(), sort_keys=True)
             for hp in pipeline.sample_hparams(args.count, args.seed)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _config_from_args(args) -> pipeline.RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        config = pipeline.RunConfig.load(path)
    else:
        config = pipeline.preset_config(args.preset)
    changes = {}
    for f in dataclasses.fields(pipeline.RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            changes[f.name] = json.loads(value) if f.name == "overrides" else value
    if args.out:
        changes["out_dir"] = args.out
    return dataclasses.replace(config, **changes)


def cmd_train_nets(args) -> int:
    config = _config_from_args(args)
    if args.dry_run:
        _dump(config.to_dict())
        return 0
    records = pipeline.run_sweep(config)
    manifest = pipeline.read_manifest(config.out_dir)
    print(f"{len(records)} records ({manifest.get('diverged', 0)} diverged, "
          f"{len(manifest.get('failures', []))} failed) in {config.out_dir}")
    return 1 if manifest.get("failures") else 0


def cmd_extract_signatures(args) -> int:
    run = _run_dir(args.run)
    records = pipeline.reextract(run, args.lam)
    pipeline.write_records(records, run / pipeline.RECORDS_FILE)
    print(f"added lambda={args.lam} signatures to {sum(not r['diverged'] for r in records)} records")
    return 0


def _examples_for(args, records):
    lam = evalkit.lambda_for(args.scope, args.family)
    examples = pipeline.examples_from_records(records, lam, args.labels)
    if evalkit._normalize(args.scope) == "per_dataset":
        if args.variation is None:
            raise CliError("--variation is required with the per-dataset scope")
        examples = [ex for ex in examples if ex.variation_id == args.variation]
    if args.holdout_fold is not None:
        plan = evalkit.make_folds(examples, args.regime, args.scope)
        if not 0 <= args.holdout_fold < len(plan.folds):
            raise CliError(f"--holdout-fold must lie in [0, {len(plan.folds) - 1}]")
        keep = plan.train_ids(args.holdout_fold)
        examples = [ex for ex in examples if ex.net_id in keep]
    if not examples:
        raise CliError("no training examples selected")
    return examples


def cmd_train_ggp(args) -> int:
    records = pipeline.read_records(_run_dir(args.run))
    examples = _examples_for(args, records)
    model = ggp.fit(args.family, examples, evalkit.task_mode_for(args.scope),
                    seed=args.seed, steps=args.steps)
    model.meta.update(scope=evalkit._normalize(args.scope), labels=args.labels,
                      regime=evalkit._normalize(args.regime), holdout_fold=args.holdout_fold,
                      variation=args.variation, n_train=len(examples))
    model.save(args.out)
    print(f"saved {args.family} model trained on {len(examples)} examples to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    records = pipeline.read_records(_run_dir(args.run))
    rep = pipeline.evaluate(records, args.scope, args.regime, args.family, args.labels,
                            steps=args.steps)
    _dump(rep.to_json())
    return 0


def cmd_export_analysis(args) -> int:
    records = pipeline.read_records(_run_dir(args.run))
    text = pipeline.export_analysis(records)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    if args.svg_dir:
        svg_dir = Path(args.svg_dir)
        svg_dir.mkdir(parents=True, exist_ok=True)
        for col in ("dropout_rate", "batch_norm", "batch_size", "learning_rate"):
            (svg_dir / f"gap_vs_train_acc_{col}.svg").write_text(
                pipeline.scatter_svg(records, col), encoding="utf-8")
    return 0


def cmd_report(args) -> int:
    run = _run_dir(args.run)
    records = pipeline.read_records(run)
    out = Path(args.out) if args.out else run / "report"
    (out / "calibration").mkdir(parents=True, exist_ok=True)
    reports = pipeline.full_report(records, args.labels, args.families, steps=args.steps)
    (out / "report.json").write_text(
        json.dumps([r.to_json() for r in reports], indent=2) + "\n", encoding="utf-8")
    for r in reports:
        name = f"{r.family}_{r.scope}_{r.regime}_{r.label_mode}.csv"
        (out / "calibration" / name).write_text(r.calibration_csv(), encoding="utf-8")
    title = ("Predicting the generalization gap" if args.labels == "gap"
             else "Predicting test accuracy")
    table = evalkit.format_table(reports, title)
    (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    if "linear" in args.families:
        check = pipeline.headline_check(reports)
        pipeline.annotate_manifest(run, f"headline_{args.labels}", check)
        print(f"linear per-dataset same-dist pooled R2 = {check['pooled_r2']}")
    return 0


# ---------------------------------------------------------------- parser

def _add_eval_flags(p):
    p.add_argument("--run", required=True, help="run directory holding records.jsonl")
    p.add_argument("--family", choices=ggp.FAMILIES, required=True)
    p.add_argument("--scope", default="single-model",
                   choices=[_dash(s) for s in evalkit.SCOPES] + list(evalkit.SCOPES))
    p.add_argument("--regime", default="same-dist",
                   choices=[_dash(r) for r in evalkit.REGIMES] + list(evalkit.REGIMES))
    p.add_argument("--labels", choices=evalkit.LABEL_MODES, default="gap")
    p.add_argument("--steps", type=int, default=None, help="override the GGP step budget")


def _add_config_flags(p):
    kinds = {"num_train": int, "loops": int, "noise": float, "seeds": int, "lambdas": float}
    for f in dataclasses.fields(pipeline.RunConfig):
        flag = f"--{_dash(f.name)}"
        dest = f"cfg_{f.name}"
        if f.name in kinds:
            p.add_argument(flag, dest=dest, type=kinds[f.name], nargs="+")
        elif f.name == "checkpoint":
            p.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)
        elif f.name == "overrides":
            p.add_argument(flag, dest=dest, metavar="JSON",
                           help='per-unit hparam overrides, e.g. \'{"7": {"learning_rate": 1e6}}\'')
        elif f.name == "out_dir":
            continue
        elif f.name == "engine":
            p.add_argument(flag, dest=dest, choices=["compiled", "numpy"])
        elif f.name == "preset":
            continue
        else:
            p.add_argument(flag, dest=dest, type=int if f.type in ("int", int) else str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gengap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-datasets", help="write spiral datasets as JSON lines")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=sorted(pipeline.PRESETS))
    g.add_argument("--spec", action="append", help="k=..,sigma=..,m=..,seed=.. (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--test-size", type=int, default=0, help="also write a test set of this size")
    p.set_defaults(func=cmd_gen_datasets)

    p = sub.add_parser("sample-hparams", help="draw network hyperparameters")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample_hparams)

    p = sub.add_parser("train-nets", help="run the training and signature sweep")
    p.add_argument("--config", help="JSON run config; flags override its fields")
    p.add_argument("--preset", choices=sorted(pipeline.PRESETS), default="desk")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_nets)

    p = sub.add_parser("extract-signatures", help="re-extract signatures from checkpoints")
    p.add_argument("--run", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.set_defaults(func=cmd_extract_signatures)

    p = sub.add_parser("train-ggp", help="fit one gap predictor and save it")
    _add_eval_flags(p)
    p.add_argument("--holdout-fold", type=int, help="train on every fold except this one")
    p.add_argument("--variation", type=int, help="variation id (per-dataset scope)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ggp)

    p = sub.add_parser("evaluate", help="cross-validate one table cell, print JSON")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-analysis", help="train accuracy / gap CSV")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--svg-dir")
    p.set_defaults(func=cmd_export_analysis)

    p = sub.add_parser("report", help="full results table")
    p.add_argument("--run", required=True)
    p.add_argument("--labels", choices=evalkit.LABEL_MODES, default="gap")
    p.add_argument("--families", nargs="+", choices=ggp.FAMILIES, default=list(ggp.FAMILIES))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", help="defaults to RUN/report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"gengap: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
