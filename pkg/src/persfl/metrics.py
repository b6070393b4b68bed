"""Accuracy, fairness statistics, teacher histograms and report files."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, SizeError

RESULTS_SCHEMA_VERSION = 1


def accuracy(params, features, labels):
    """Percentage of rows whose argmax logit (lowest index on ties) is the label."""
    from .nn import forward

    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("accuracy needs a non-empty evaluation set")
    pred = np.argmax(forward(params, features), axis=1)
    return 100.0 * float(np.count_nonzero(pred == labels)) / labels.size


def fairness_stats(per_user_acc):
    """Mean and sample standard deviation (divisor K - 1) of per-user accuracy."""
    acc = [float(a) for a in per_user_acc]
    if len(acc) < 2:
        raise SizeError(f"fairness needs at least 2 users, got {len(acc)}")
    mean = math.fsum(acc) / len(acc)
    var = math.fsum((a - mean) ** 2 for a in acc) / (len(acc) - 1)
    return mean, math.sqrt(var)


def teacher_histogram(choices):
    """Map teacher round -> number of clients that picked it.

    Accepts teacher choices or bare round numbers.
    """
    return dict(sorted(Counter(int(getattr(c, "round", c)) for c in choices).items()))


@dataclass
class AccuracyTable:
    """Per-user accuracy columns keyed by method name."""

    columns: dict = field(default_factory=dict)

    def add(self, method, per_user):
        self.columns[method] = [float(a) for a in per_user]

    def stats(self, method):
        return fairness_stats(self.columns[method])

    def rows(self):
        methods = list(self.columns)
        n = len(next(iter(self.columns.values()))) if methods else 0
        return methods, [[self.columns[m][k] for m in methods] for k in range(n)]


@dataclass
class InteractionGrid:
    lambdas: tuple
    temps: tuple
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.lambdas), len(self.temps)):
            raise DataError(f"grid is {self.values.shape}, expected "
                            f"{(len(self.lambdas), len(self.temps))}")

    def rows(self):
        for i, lam in enumerate(self.lambdas):
            for j, t in enumerate(self.temps):
                yield lam, t, float(self.values[i, j])


def _fmt(x):
    return f"{x:.1f}"


def _write_text(path, text):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def dumps_results(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def emit_report(results, out_dir):
    """Write ``results.json``, ``tables/*.csv`` and ``plotdata/*.csv``.

    ``results`` is the run document produced by the CLI (see README for the
    schema).  Returns the list of written paths.
    """
    out = Path(out_dir)
    try:
        (out / "tables").mkdir(parents=True, exist_ok=True)
        (out / "plotdata").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directories under {out}: {exc}") from exc
    written = []

    def put(rel, text):
        path = out / rel
        _write_text(path, text)
        written.append(path)

    put("results.json", dumps_results(results))
    clients = results["clients"]

    put("tables/per_user_accuracy.csv", _csv_text(
        ["user", "fedavg", "persfl"],
        [[c["client"], _fmt(c["fedavg_test_acc"]), _fmt(c["test_acc"])] for c in clients]))

    summary = results["summary"]
    put("tables/fairness.csv", _csv_text(
        ["method", "avg_acc", "std_dev"],
        [[m, _fmt(summary[m]["mean"]), _fmt(summary[m]["std"])] for m in sorted(summary)]))

    put("tables/optimal_params.csv", _csv_text(
        ["user", "teacher_round", "lambda_star", "T_star"],
        [[c["client"], f"{c['teacher_round']:g}", f"{c['lambda_star']:.3f}",
          f"{c['T_star']:.3f}"] for c in clients]))

    put("tables/teacher_histogram.csv", _csv_text(
        ["round", "count"], [[r, n] for r, n in results["teacher_histogram"].items()]))

    put("tables/rounds.csv", _csv_text(
        ["round", "uploads", "downloads", "mean_train_loss"],
        [[r["round"], r["uploads"], r["downloads"], f"{r['mean_train_loss']:.6f}"]
         for r in results["rounds"]]))

    put("tables/budget.csv", _csv_text(
        ["user", "fedavg_epochs", "distill_epochs", "total"],
        [[c["client"], c["budget"]["fedavg_epochs"], c["budget"]["distill_epochs"],
          c["budget"]["total"]] for c in clients]))

    for c in clients:
        grid = c["interaction"]
        put(f"plotdata/user_{c['client']:02d}.csv", _csv_text(
            ["lambda", "T", "accuracy"],
            [[f"{lam:g}", f"{t:g}", _fmt(acc)] for lam, t, acc in grid]))
    return written
