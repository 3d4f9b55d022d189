"""Training loop, five-fold cross-validation, layer selection and classification metrics."""
import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)

METRICS = ("nll", "micro_f1", "macro_f1")


class TrainConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def nll(log_probs, labels):
    """Mean negative log-probability of the true class."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < 1:
        raise ValueError("nll needs at least one instance")
    if labels.min() < 0 or labels.max() >= log_probs.shape[1]:
        raise ValueError("label out of range")
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if len(pred) < 1:
        raise ValueError("need at least one prediction")
    return pred, truth


def micro_f1(pred, truth):
    pred, truth = _check_pair(pred, truth)
    tp = int((pred == truth).sum())
    fp = fn = len(pred) - tp  # single-label: each miss is one FP and one FN
    return 2 * tp / (2 * tp + fp + fn)


def macro_f1(pred, truth, num_classes=None):
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    pred, truth = _check_pair(pred, truth)
    c = num_classes or int(max(pred.max(), truth.max())) + 1
    scores = []
    for k in range(c):
        tp = np.sum((pred == k) & (truth == k))
        fp = np.sum((pred == k) & (truth != k))
        fn = np.sum((pred != k) & (truth == k))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def evaluate_predictions(log_probs, labels, num_classes):
    pred = np.argmax(log_probs, axis=1)
    return {"nll": nll(log_probs, labels), "micro_f1": micro_f1(pred, labels),
            "macro_f1": macro_f1(pred, labels, num_classes)}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    batch_size: int = 1024
    patience: int = 5
    max_layers: int = 4
    folds: int = 5
    max_epochs: int = 200
    val_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "patience", "folds", "max_epochs"):
            if getattr(self, name) <= 0:
                raise TrainConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise TrainConfigError("weight_decay must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise TrainConfigError("val_fraction must lie in (0, 1)")


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True when training should stop."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch, value):
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _rng(*key):
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# stream tags keep the RNG streams of different purposes apart
_INIT, _SPLIT, _EPOCH, _EVAL = 1, 2, 3, 4


def split_fold(graph, fold, seed, val_fraction=0.25):
    """``(train, val, test)`` target indices; test is the fold, the rest is split seeded."""
    folds = graph.folds
    if folds is None or not 0 <= fold < len(folds):
        raise TrainConfigError(f"fold {fold} not available")
    test = np.sort(folds[fold])
    rest = np.sort(np.concatenate([f for i, f in enumerate(folds) if i != fold]))
    rest = _rng(seed, fold, _SPLIT).permutation(rest)
    n_val = int(round(len(rest) * val_fraction))
    val, train = np.sort(rest[:n_val]), np.sort(rest[n_val:])
    if not len(train) or not len(val) or not len(test):
        raise TrainConfigError(f"fold {fold} leaves an empty train/validation/test split")
    return train, val, test


def predict_log_probs(model, graph, nodes, batch_size, rng):
    out = []
    for lo in range(0, len(nodes), batch_size):
        chunk = nodes[lo:lo + batch_size]
        batch = model.sample(graph, chunk, rng)
        logits = model.forward(graph, batch).data
        z = logits - logits.max(axis=1, keepdims=True)
        out.append(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))
    return np.concatenate(out)


def evaluate(model, graph, nodes, train_config, tag):
    rng = _rng(train_config.seed, tag, _EVAL)
    lp = predict_log_probs(model, graph, nodes, train_config.batch_size, rng)
    return evaluate_predictions(lp, graph.labels[nodes], graph.num_classes)


def train_step(model, graph, targets, train_config, rng):
    batch = model.sample(graph, targets, rng)
    loss = ad.nll_of_logsoftmax(model.forward(graph, batch), graph.labels[targets])
    ad.backward(loss)
    ad.adam_step(model.params, train_config.lr, weight_decay=train_config.weight_decay)
    return float(loss.data)


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    epochs_run: int
    val_nll: float
    test: dict
    snapshot: dict = field(repr=False)
    history: list = field(default_factory=list, repr=False)


def run_fold(graph, fold, model_config, train_config):
    """Train on one fold with early stopping on validation NLL; report test metrics of the best epoch."""
    tc = train_config
    train, val, test = split_fold(graph, fold, tc.seed, tc.val_fraction)
    model = build_model(graph, model_config, _rng(tc.seed, fold, _INIT))
    stopper = EarlyStopping(tc.patience)
    best = model.params.snapshot()
    history = []
    epoch = 0
    for epoch in range(1, tc.max_epochs + 1):
        rng = _rng(tc.seed, fold, _EPOCH, epoch)
        order = rng.permutation(train)
        losses = [train_step(model, graph, order[lo:lo + tc.batch_size], tc, rng)
                  for lo in range(0, len(order), tc.batch_size)]
        val_metrics = evaluate(model, graph, val, tc, fold)
        history.append((epoch, float(np.mean(losses)), val_metrics["nll"]))
        if getattr(model, "last_coverage", None):
            log.debug("epoch %d empty-neighborhood fraction %s", epoch, model.last_coverage)
        improved = val_metrics["nll"] < stopper.best
        stop = stopper.step(epoch, val_metrics["nll"])
        if improved:
            best = model.params.snapshot()
        if stop:
            break
    model.params.load_snapshot(best)
    test_metrics = evaluate(model, graph, test, tc, 100 + fold)
    log.info("fold %d: best epoch %d/%d val nll %.4f test %s", fold, stopper.best_epoch, epoch,
             stopper.best, {k: round(v, 4) for k, v in test_metrics.items()})
    return FoldResult(fold, stopper.best_epoch, epoch, stopper.best, test_metrics, best, history), model


@dataclass
class CVReport:
    dataset: str
    variant: str
    layers: int
    rows: list  # FoldResult

    def values(self, metric, split="test"):
        if split == "val":
            return np.array([r.val_nll for r in self.rows])
        return np.array([r.test[metric] for r in self.rows])

    def mean(self, metric, split="test"):
        return float(np.mean(self.values(metric, split)))

    def std(self, metric, split="test"):
        v = self.values(metric, split)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def table(self):
        head = f"{'Method':<10} {'NLL':>17} {'Macro F1':>17} {'Micro F1':>17}"
        cells = [format_mean_std(self.mean(m), self.std(m)) for m in ("nll", "macro_f1", "micro_f1")]
        name = f"{self.variant.upper()} (k={self.layers})"
        return head + "\n" + f"{name:<10} " + " ".join(f"{c:>17}" for c in cells)


def format_mean_std(mean, std, digits=3):
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()), float(values.std(ddof=1)) if len(values) > 1 else 0.0


def cross_validate(graph, model_config, train_config, dataset="dataset", folds=None,
                   require_folds=True, on_fold=None):
    n_folds = len(graph.folds or [])
    if require_folds and n_folds != train_config.folds:
        raise TrainConfigError(f"expected {train_config.folds} folds in splits.json, found {n_folds}")
    rows = []
    for fold in (range(n_folds) if folds is None else folds):
        result, model = run_fold(graph, fold, model_config, train_config)
        rows.append(result)
        if on_fold is not None:
            on_fold(result, model)
    return CVReport(dataset, model_config.variant, model_config.layers, rows)


def pick_best_layer(val_nll_by_k):
    """Smallest mean validation NLL; ties go to the smaller layer count."""
    return min(sorted(val_nll_by_k), key=lambda k: (val_nll_by_k[k], k))


def layer_candidates(variant, max_layers=4):
    return list(range(1 if variant == "rgcn" else 0, max_layers + 1))


def select_layers(graph, base_config, train_config, dataset="dataset", layers=None,
                  per_fold=False, folds=None, require_folds=True, on_fold=None):
    """Cross-validate each layer count; returns ``(best_k, {k: CVReport})``.

    With ``per_fold`` the best k is chosen per fold and ``best_k`` maps fold -> k.
    ``on_fold(k, result, model)`` is called after every trained fold.
    """
    ks = layer_candidates(base_config.variant, train_config.max_layers) if layers is None else list(layers)
    if not ks:
        raise TrainConfigError("no layer candidates")
    reports = {}
    for k in ks:
        cfg = replace(base_config, layers=k)
        hook = None if on_fold is None else (lambda result, model, k=k: on_fold(k, result, model))
        reports[k] = cross_validate(graph, cfg, train_config, dataset, folds, require_folds, hook)
    if per_fold:
        n = len(reports[ks[0]].rows)
        return {i: pick_best_layer({k: reports[k].rows[i].val_nll for k in ks}) for i in range(n)}, reports
    return pick_best_layer({k: reports[k].mean("nll", "val") for k in ks}), reports


def per_fold_report(reports, choice):
    """Fold ``i`` taken from ``reports[choice[i]]``; the layers field lists the choices."""
    first = next(iter(reports.values()))
    rows = [reports[choice[i]].rows[i] for i in sorted(choice)]
    layers = "/".join(str(choice[i]) for i in sorted(choice))
    return CVReport(first.dataset, first.variant, layers, rows)


# ---------------------------------------------------------------------------
# csv


CSV_COLUMNS = ("dataset", "variant", "layers", "fold", "nll", "micro_f1", "macro_f1")


def report_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        for r in rep.rows:
            w.writerow([rep.dataset, rep.variant, rep.layers, r.fold] + [repr(r.test[m]) for m in METRICS])
        w.writerow([rep.dataset, rep.variant, rep.layers, "mean"] + [repr(rep.mean(m)) for m in METRICS])
        w.writerow([rep.dataset, rep.variant, rep.layers, "std"] + [repr(rep.std(m)) for m in METRICS])
    return buf.getvalue()
