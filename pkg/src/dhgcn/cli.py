"""Command-line entry point: generate, train, eval, gradcheck, sweep, show-sen.

Exit codes: 0 success, 1 validation or configuration error, 2 internal failure.
"""
import argparse
import csv
import io
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck
from .autodiff import ParameterStore
from .graph import GraphValidationError, MetapathError, load_dataset, save_dataset
from .model import MAX_LAYERS, VARIANTS, ModelConfig, ModelConfigError, build_model
from .sampling import SamplingConfigError, build_batch
from .sen import derive_sen_template
from .synthetic import SynthConfig, SynthConfigError, generate
from .training import (METRICS, CVReport, FoldResult, TrainConfig, TrainConfigError, cross_validate,
                       evaluate, per_fold_report, report_csv, select_layers, split_fold)

log = logging.getLogger("dhgcn")


class ConfigError(Exception):
    """Bad flags or inputs; exit code 1."""


class InternalError(Exception):
    """A check the program itself failed; exit code 2."""


USER_ERRORS = (ConfigError, GraphValidationError, MetapathError, ModelConfigError, SamplingConfigError,
               SynthConfigError, TrainConfigError, FileNotFoundError)


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _layers_arg(text):
    if text == "auto":
        return text
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}")
    if not 0 <= k <= MAX_LAYERS:
        raise argparse.ArgumentTypeError(f"layers must be in 0..{MAX_LAYERS} or 'auto'")
    return k


def _int_list(text):
    """``"1..4"`` or ``"1,3,8"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1..10 or a list like 1,3,8, got {text!r}")


def _variant_list(text):
    out = [v for v in text.split(",") if v]
    bad = [v for v in out if v not in VARIANTS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"unknown variant(s) {bad}; choose from {', '.join(VARIANTS)}")
    return out


def _add_model_flags(p):
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--activation", choices=["tanh", "relu", "leaky_relu"], default="tanh")
    p.add_argument("--leaky-slope", type=float, default=0.01)
    p.add_argument("--walks", type=int, default=20, help="random walks per node and metapath")
    p.add_argument("--fanout", type=int, default=20, help="neighbors kept per SEN expansion")
    p.add_argument("--no-self-term", action="store_true",
                   help="drop the node's own previous representation from the layer update")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--weight-decay", type=float, default=0.0001)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--allow-fold-count", action="store_true", help="accept a fold count other than 5")
    p.add_argument("--only-folds", type=_int_list, default=None, help="train a subset of folds, e.g. 0 or 0,2")
    p.add_argument("--per-fold-layers", action="store_true", help="with --layers auto, choose k per fold")


def build_parser():
    parser = Parser(prog="dhgcn", description="Heterogeneous graph node classification experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("generate", help="write one synthetic dataset")
    p.add_argument("--family", type=int, required=True)
    p.add_argument("--targets", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--feature-dim", type=int, default=50)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--components", type=int, default=5)
    p.add_argument("--alpha", type=float, default=1.0, help="Dirichlet concentration")
    p.add_argument("--info-std", type=float, default=1.0)
    p.add_argument("--mean-scale", type=float, default=3.0)
    p.add_argument("--bridge-features", choices=["constant", "onehot"], default="constant")
    p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("train", help="cross-validate one model on a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--variant", required=True)
    p.add_argument("--layers", type=_layers_arg, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_model_flags(p)

    p = sub.add_parser("eval", help="re-evaluate the checkpoints of a run directory")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--dataset", type=Path, default=None, help="defaults to the dataset recorded in the run")
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and model")
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("sweep", help="train over synthetic families, variants and seeds")
    p.add_argument("--families", type=_int_list, required=True)
    p.add_argument("--variants", type=_variant_list, required=True)
    p.add_argument("--seeds", type=_int_list, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--targets", type=int, default=2000)
    p.add_argument("--layers", type=_layers_arg, default=1)
    p.add_argument("--jobs", type=int, default=1)
    _add_model_flags(p)

    p = sub.add_parser("show-sen", help="print the schema-derived ego-network template")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dump-batch", type=_int_list, default=None, metavar="TARGETS",
                   help="also sample and print a batch for these target indices")
    p.add_argument("--layers", type=int, default=1)
    return parser


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    out = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
    cfg = SynthConfig(family=args.family, n_targets=args.targets, feature_dim=args.feature_dim,
                      num_classes=args.classes, components=args.components, dirichlet_alpha=args.alpha,
                      info_count_std=args.info_std, mean_scale=args.mean_scale,
                      bridge_features=args.bridge_features, folds=args.folds, seed=args.seed)
    graph, trace = generate(cfg)
    if out.exists():
        for f in out.iterdir():
            if f.is_file():
                f.unlink()
    save_dataset(graph, out)
    trace.save(out / "trace.json")
    print(f"family {cfg.family}, seed {cfg.seed}: {out}")
    print(graph.summary())
    return 0


# ---------------------------------------------------------------------------
# train / eval


def _configs(args, layers):
    mc = ModelConfig(variant=args.variant, layers=layers, hidden_dim=args.hidden_dim,
                     activation=args.activation, leaky_slope=args.leaky_slope, walks=args.walks,
                     fanout=args.fanout, self_term=not args.no_self_term)
    tc = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                     patience=args.patience, max_epochs=args.max_epochs, seed=args.seed)
    return mc, tc


def train_run(dataset, out, args):
    """Cross-validate (and select k when asked); returns the reported CVReport."""
    graph = load_dataset(dataset)
    name = Path(dataset).name
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    auto = args.layers == "auto"
    mc, tc = _configs(args, 1 if auto and args.variant == "rgcn" else (0 if auto else args.layers))
    require = not args.allow_fold_count
    folds = args.only_folds

    def save(k, result, model):
        model.params.save(out / f"k{k}" / f"fold{result.fold}")

    run = {"dataset": str(Path(dataset).resolve()), "dataset_name": name, "model": mc.to_dict(),
           "train": vars(tc), "layers": args.layers, "folds": folds, "allow_fold_count": args.allow_fold_count}
    if auto:
        best, reports = select_layers(graph, mc, tc, name, per_fold=args.per_fold_layers, folds=folds,
                                      require_folds=require, on_fold=save)
        report = per_fold_report(reports, best) if args.per_fold_layers else reports[best]
        (out / "candidates.csv").write_text(report_csv(reports.values()), encoding="utf-8")
        if args.per_fold_layers:
            run["selected"] = {str(k): v for k, v in best.items()}
        else:
            run["selected"] = run["model"]["layers"] = best
        run["val_nll"] = {str(k): r.mean("nll", "val") for k, r in reports.items()}
    else:
        report = cross_validate(graph, mc, tc, name, folds, require,
                                lambda result, model: save(mc.layers, result, model))
        run["selected"] = mc.layers
    run["fold_layers"] = {str(r.fold): _fold_layers(run["selected"], r.fold) for r in report.rows}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "metrics.csv").write_text(report_csv([report]), encoding="utf-8")
    table = report.table()
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    return report


def _fold_layers(selected, fold):
    return selected[str(fold)] if isinstance(selected, dict) else selected


def cmd_train(args):
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)}")
    report = train_run(args.dataset, args.out, args)
    print(report.table())
    return 0


def cmd_eval(args):
    run_path = args.run / "run.json"
    if not run_path.is_file():
        raise ConfigError(f"{args.run} is not a run directory (no run.json)")
    run = json.loads(run_path.read_text(encoding="utf-8"))
    dataset = args.dataset or Path(run["dataset"])
    graph = load_dataset(dataset)
    tc = TrainConfig(**run["train"])
    # splits follow the training seed; --seed drives evaluation-time sampling only
    eval_tc = replace(tc, seed=args.seed)
    rows = []
    fold_layers = {int(f): int(k) for f, k in run["fold_layers"].items()}
    for fold, k in sorted(fold_layers.items()):
        mc = ModelConfig(**{**run["model"], "layers": k})
        model = build_model(graph, mc, np.random.default_rng(0))
        ckpt = args.run / f"k{k}" / f"fold{fold}"
        if not ckpt.with_suffix(".json").is_file():
            raise ConfigError(f"missing checkpoint {ckpt}.json")
        stored = ParameterStore.load(ckpt)
        if stored.names() != model.params.names():
            raise ConfigError(f"checkpoint {ckpt} does not match the recorded model configuration")
        model.params.load_snapshot(stored.snapshot())
        _, _, test = split_fold(graph, fold, tc.seed, tc.val_fraction)
        metrics = evaluate(model, graph, test, eval_tc, 100 + fold)
        rows.append(FoldResult(fold, 0, 0, float("nan"), metrics, {}))
    ks = [fold_layers[f] for f in sorted(fold_layers)]
    layers = ks[0] if len(set(ks)) == 1 else "/".join(map(str, ks))
    report = CVReport(run["dataset_name"], run["model"]["variant"], layers, rows)
    sys.stdout.write(report_csv([report]))
    print(report.table())
    return 0


# ---------------------------------------------------------------------------
# gradcheck / show-sen


def cmd_gradcheck(args):
    rows, ok = gradcheck.run(args.seed)
    width = max(len(name) for name, _ in rows)
    for name, err in rows:
        flag = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {flag}")
    worst = max(err for _, err in rows)
    print(f"max relative error {worst:.3e} (tolerance {gradcheck.TOLERANCE:g}): {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise InternalError("gradient check failed")
    return 0


def cmd_show_sen(args):
    graph = load_dataset(args.dataset)
    if graph.target_type is None:
        raise ConfigError("dataset has no target type")
    tpl = derive_sen_template(graph.schema, graph.target_type)
    print(tpl.compact())
    print(tpl.format())
    if args.dump_batch is not None:
        targets = np.array(args.dump_batch, dtype=np.int64)
        n = graph.num_nodes(graph.target_type)
        if targets.min(initial=0) < 0 or targets.max(initial=0) >= n:
            raise ConfigError(f"target indices must lie in 0..{n - 1}")
        batch = build_batch(graph, targets, args.layers, np.random.default_rng(args.seed), template=tpl)
        print(batch.dump(graph))
    return 0


# ---------------------------------------------------------------------------
# sweep

SWEEP_COLUMNS = ("family", "variant", "seed", "layers") + tuple(
    f"{m}_{s}" for m in METRICS for s in ("mean", "std"))


def _cell_name(family, variant, seed):
    return f"f{family}_{variant}_s{seed}"


def _run_cell(job):
    family, variant, seed, args = job
    out = args.out
    cell = out / "cells" / _cell_name(family, variant, seed)
    data = out / "data" / f"f{family}_s{seed}"
    try:
        if not (data / "DONE").exists():
            if data.exists():
                for f in data.iterdir():
                    f.unlink()
            graph, trace = generate(SynthConfig(family=family, n_targets=args.targets, seed=seed))
            save_dataset(graph, data)
            trace.save(data / "trace.json")
            (data / "DONE").write_text("", encoding="utf-8")
        cell_args = argparse.Namespace(**{**vars(args), "variant": variant, "seed": seed})
        report = train_run(data, cell, cell_args)
        row = [family, variant, seed, report.layers]
        for m in METRICS:
            row += [repr(report.mean(m)), repr(report.std(m))]
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(row)
        (cell / "row.csv").write_text(buf.getvalue(), encoding="utf-8")
        (cell / "DONE").write_text("", encoding="utf-8")
        (cell / "FAILED").unlink(missing_ok=True)
        return None
    except Exception:
        cell.mkdir(parents=True, exist_ok=True)
        (cell / "FAILED").write_text(traceback.format_exc(), encoding="utf-8")
        return _cell_name(family, variant, seed)


def cmd_sweep(args):
    bad = [f for f in args.families if not 1 <= f <= 10]
    if bad:
        raise ConfigError(f"families must lie in 1..10, got {bad}")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    args.out.mkdir(parents=True, exist_ok=True)
    cells = [(f, v, s) for f in args.families for v in args.variants for s in args.seeds]
    todo = [(f, v, s, args) for f, v, s in cells
            if not (args.out / "cells" / _cell_name(f, v, s) / "DONE").exists()]
    print(f"{len(cells)} cells, {len(cells) - len(todo)} already complete")
    if args.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            failed = [r for r in pool.map(_run_cell, todo) if r]
    else:
        failed = [r for r in map(_run_cell, todo) if r]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(SWEEP_COLUMNS)
    for f, v, s in cells:
        row = args.out / "cells" / _cell_name(f, v, s) / "row.csv"
        if row.exists() and (row.parent / "DONE").exists():
            buf.write(row.read_text(encoding="utf-8"))
    (args.out / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    sys.stdout.write(buf.getvalue())
    if failed:
        for name in failed:
            print(f"cell {name} failed; see {args.out / 'cells' / name / 'FAILED'}", file=sys.stderr)
        raise InternalError(f"{len(failed)} of {len(cells)} cells failed")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "sweep": cmd_sweep, "show-sen": cmd_show_sen}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InternalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
