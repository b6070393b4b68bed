"""Command-line entry point.

    persfl split    --config run.yaml --out runs/demo
    persfl train    --out runs/demo
    persfl distill  --out runs/demo
    persfl report   --out runs/demo
    persfl evaluate --out runs/demo --checkpoint runs/demo/checkpoints/rep_00/round_0020.pflc
    persfl run      --config run.yaml --out runs/demo     # all of the above

Exit codes: 0 success, 2 config error, 3 data error, 4 integrity error,
1 anything else (including refusing to overwrite without ``--force``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint
from .config import RunConfig
from .distill import grid_search, personalization_seed, select_teacher
from .errors import ConfigError, DataError, IntegrityError, PersFLError
from .fedsim import run_fedavg
from .metrics import (RESULTS_SCHEMA_VERSION, accuracy, emit_report, fairness_stats,
                      teacher_histogram)
from .splitter import FederatedSplit, make_split

log = logging.getLogger("persfl")

CONFIG_NAME = "config.yaml"
SPLIT_NAME = "split.json"
TRAIN_NAME = "train.json"
DISTILL_NAME = "distill.json"
RESULTS_NAME = "results.json"
TIMINGS_NAME = "timings.json"
LOCK_NAME = ".persfl.lock"


class OverwriteError(PersFLError):
    pass


class RunLock:
    """Exclusive ownership of a run directory for one process."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / LOCK_NAME

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PersFLError(f"{self.path.parent} is locked by another process "
                              f"(remove {self.path} if that process is gone)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_json(path, doc):
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise PersFLError(f"missing artifact: {path} ({what}); run the earlier step first") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path} is not valid JSON: {exc}") from exc


def _guard(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise OverwriteError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _rep_dir(run_dir, rep):
    return Path(run_dir) / "checkpoints" / f"rep_{rep:02d}"


def cmd_split(cfg, run_dir, force=False):
    run_dir = Path(run_dir)
    _guard([run_dir / SPLIT_NAME], force)
    dataset = cfg.load_dataset()
    split = make_split(dataset, cfg.split_spec())
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / CONFIG_NAME, "w", newline="\n") as fh:
        yaml.safe_dump(cfg.tree, fh, sort_keys=True)
    split.save(run_dir / SPLIT_NAME)
    log.info("wrote %s with %d clients", run_dir / SPLIT_NAME, split.K)
    return split


def _load_split(run_dir, dataset):
    split = FederatedSplit.from_json(_read_json(Path(run_dir) / SPLIT_NAME, "split"))
    if split.num_samples != len(dataset):
        raise DataError(f"split was made for {split.num_samples} samples, dataset has "
                        f"{len(dataset)}")
    return split


def cmd_train(cfg, run_dir, force=False):
    run_dir = Path(run_dir)
    _guard([run_dir / "checkpoints", run_dir / TRAIN_NAME], force)
    dataset = cfg.load_dataset()
    split = _load_split(run_dir, dataset)
    runs, timings = [], []
    for rep in range(cfg.repetitions):
        seed = cfg.repetition_seed(rep)
        result = run_fedavg(dataset, split, cfg.fed_config(seed))
        manifest = checkpoint.save_snapshots(_rep_dir(run_dir, rep), result.snapshots)
        final_name = f"final_{cfg.fed_config(seed).E_G:04d}.pflc"
        final_hash = checkpoint.save(_rep_dir(run_dir, rep) / final_name, result.final)
        runs.append({"rep": rep, "seed": seed, "ledger": result.ledger.to_json(),
                     "snapshots": len(manifest["snapshots"]),
                     "final": {"file": final_name, "sha256": final_hash}})
        timings.append([r.wall_time for r in result.ledger.rounds])
        log.info("repetition %d: %d rounds, final mean train loss %.4f", rep,
                 result.ledger.num_rounds, result.ledger.rounds[-1].mean_train_loss)
    _write_json(run_dir / TRAIN_NAME, {"schema_version": 1, "runs": runs})
    _write_json(run_dir / TIMINGS_NAME, {"round_wall_time": timings})
    return runs


def _mean(values):
    return float(np.mean(values))


def cmd_distill(cfg, run_dir, force=False):
    run_dir = Path(run_dir)
    _guard([run_dir / DISTILL_NAME], force)
    dataset = cfg.load_dataset()
    split = _load_split(run_dir, dataset)
    train = _read_json(run_dir / TRAIN_NAME, "FedAvg training record")
    dcfg = cfg.distill_config()
    reps = []
    for run in train["runs"]:
        rep_dir = _rep_dir(run_dir, run["rep"])
        snapshots = checkpoint.load_snapshots(rep_dir)
        final_path = rep_dir / run["final"]["file"]
        if checkpoint.file_sha256(final_path) != run["final"]["sha256"]:
            raise checkpoint.HashMismatchError(f"{final_path} does not match its recorded hash")
        final = checkpoint.load(final_path)
        by_round = {s.round: s.params for s in snapshots}
        fed_epochs = run["ledger"]["local_epochs_run"]
        clients = []
        for k, client in enumerate(split.clients):
            choice = select_teacher(snapshots, client, dataset, client_index=k)
            res = grid_search(by_round[choice.round], dataset, client, dcfg,
                              personalization_seed(run["seed"], k), fedavg_final=final,
                              client_index=k)
            clients.append({
                "client": k,
                "teacher_round": choice.round,
                "teacher_val_loss": choice.val_loss,
                "lambda_star": res.lambda_star,
                "T_star": res.T_star,
                "val_acc": res.val_acc,
                "test_acc": res.test_acc,
                "fedavg_test_acc": accuracy(final, *dataset.subset(client.test)),
                "fedavg_val_acc": accuracy(final, *dataset.subset(client.val)),
                "budget": {"fedavg_epochs": fed_epochs[k], "distill_epochs": res.distill_epochs,
                           "total": fed_epochs[k] + res.distill_epochs},
                "sweep": [[c.lam, c.T, c.val_acc, c.test_acc] for c in res.sweep],
            })
        reps.append({"rep": run["rep"], "seed": run["seed"], "clients": clients})
        log.info("repetition %d: distilled %d clients", run["rep"], len(clients))

    averaged = []
    for k in range(split.K):
        per_run = [r["clients"][k] for r in reps]
        cells = {}
        for rec in per_run:
            for lam, t, _, test in rec["sweep"]:
                cells.setdefault((lam, t), []).append(test)
        averaged.append({
            "client": k,
            "teacher_round": _mean([r["teacher_round"] for r in per_run]),
            "lambda_star": _mean([r["lambda_star"] for r in per_run]),
            "T_star": _mean([r["T_star"] for r in per_run]),
            "val_acc": _mean([r["val_acc"] for r in per_run]),
            "test_acc": _mean([r["test_acc"] for r in per_run]),
            "fedavg_test_acc": _mean([r["fedavg_test_acc"] for r in per_run]),
            "objective": dcfg.objective,
            "init_mode": dcfg.init_mode,
            "budget": per_run[0]["budget"],
            "interaction": [[lam, t, _mean(v)] for (lam, t), v in cells.items()],
            "per_run": [{key: r[key] for key in ("teacher_round", "lambda_star", "T_star",
                                                 "val_acc", "test_acc", "fedavg_test_acc")}
                        for r in per_run],
        })
    doc = {"schema_version": 1, "objective": dcfg.objective, "init_mode": dcfg.init_mode,
           "lambda_grid": list(dcfg.lambda_grid), "T_grid": list(dcfg.T_grid),
           "repetitions": reps, "clients": averaged}
    _write_json(run_dir / DISTILL_NAME, doc)
    return doc


def _summary(values):
    if len(values) < 2:
        return {"mean": _mean(values), "std": None}
    mean, std = fairness_stats(values)
    return {"mean": mean, "std": std}


def build_results(cfg, split, train, distill, timestamp):
    clients = distill["clients"]
    rounds = [r["teacher_round"] for rep in distill["repetitions"] for r in rep["clients"]]
    ledger0 = train["runs"][0]["ledger"]
    fcfg = cfg.fed_config(0)
    dcfg = cfg.distill_config()
    budget_formula = fcfg.E_G * fcfg.hyper.local_epochs + dcfg.grid_size * dcfg.E
    return {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "generated_at": timestamp,
        "config": cfg.tree,
        "split": {"strategy": split.spec.strategy, "K": split.K,
                  "client_sizes": [list(c.sizes) for c in split.clients],
                  "client_labels": None},
        "clients": clients,
        "summary": {"fedavg": _summary([c["fedavg_test_acc"] for c in clients]),
                    "persfl": _summary([c["test_acc"] for c in clients])},
        "per_run_summary": [
            {"rep": rep["rep"],
             "fedavg": _summary([c["fedavg_test_acc"] for c in rep["clients"]]),
             "persfl": _summary([c["test_acc"] for c in rep["clients"]])}
            for rep in distill["repetitions"]],
        "teacher_histogram": {str(k): v for k, v in teacher_histogram(rounds).items()},
        "rounds": ledger0["rounds"],
        "communication": {"global_rounds": len(ledger0["rounds"]),
                          "uploads_per_round": split.K, "downloads_per_round": split.K,
                          "model_payloads": 2 * split.K * len(ledger0["rounds"])},
        "hyper": {"eta": ledger0["eta"], "batch_size": ledger0["batch_size"],
                  "local_epochs": ledger0["local_epochs"], "distill_epochs": dcfg.E},
        "budget": {"per_client_local_epochs": budget_formula,
                   "formula": "E_G*E_L + |lambda_grid|*|T_grid|*E",
                   "matches_ledger": all(c["budget"]["total"] == budget_formula
                                         for c in clients)},
    }


def cmd_report(cfg, run_dir, force=False, timestamp=None):
    run_dir = Path(run_dir)
    _guard([run_dir / RESULTS_NAME], force)
    split = FederatedSplit.from_json(_read_json(run_dir / SPLIT_NAME, "split"))
    train = _read_json(run_dir / TRAIN_NAME, "FedAvg training record")
    distill = _read_json(run_dir / DISTILL_NAME, "distillation results")
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    doc = build_results(cfg, split, train, distill, timestamp)
    dataset = cfg.load_dataset()
    doc["split"]["client_labels"] = split.client_labels(dataset.labels)
    emit_report(doc, run_dir)
    return doc


def cmd_evaluate(cfg, run_dir, ckpt, part="test"):
    dataset = cfg.load_dataset()
    split = _load_split(run_dir, dataset)
    params = checkpoint.load(ckpt)
    out = {}
    for k, client in enumerate(split.clients):
        out[k] = accuracy(params, *dataset.subset(getattr(client, part)))
    return out


def _resolve_config(args):
    run_dir = Path(args.out) if args.out else None
    if args.config:
        cfg = RunConfig.load(args.config)
    elif run_dir is not None and (run_dir / CONFIG_NAME).exists():
        cfg = RunConfig.load(run_dir / CONFIG_NAME)
    else:
        raise ConfigError("no --config given and no saved config in the run directory")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if run_dir is None:
        if not cfg.tree["output_dir"]:
            raise ConfigError("no --out given and config has no output_dir")
        run_dir = Path(cfg.tree["output_dir"])
    return cfg, run_dir


def build_parser():
    parser = argparse.ArgumentParser(prog="persfl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help="run directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    common(sub.add_parser("split", help="assign samples to clients"))
    common(sub.add_parser("train", help="FedAvg stage, writes per-round checkpoints"))
    common(sub.add_parser("distill", help="teacher selection and distillation per client"))
    common(sub.add_parser("report", help="write results.json, tables and plot data"))
    common(sub.add_parser("run", help="split, train, distill and report in one go"))
    ev = common(sub.add_parser("evaluate", help="accuracy of a checkpoint on every client"))
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--part", choices=("train", "val", "test"), default="test")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, run_dir = _resolve_config(args)
        if args.command == "evaluate":
            accs = cmd_evaluate(cfg, run_dir, args.checkpoint, args.part)
            print(json.dumps({str(k): v for k, v in accs.items()}, indent=2))
            return 0
        with RunLock(run_dir):
            t0 = time.perf_counter()
            if args.command in ("split", "run"):
                cmd_split(cfg, run_dir, args.force)
            if args.command in ("train", "run"):
                cmd_train(cfg, run_dir, args.force)
            if args.command in ("distill", "run"):
                cmd_distill(cfg, run_dir, args.force)
            if args.command in ("report", "run"):
                doc = cmd_report(cfg, run_dir, args.force)
                for name, label in (("fedavg", "FedAvg"), ("persfl", "PersFL")):
                    s = doc["summary"][name]
                    std = "n/a" if s["std"] is None else f"{s['std']:.1f}"
                    print(f"{label:<7} mean {s['mean']:.1f}  std {std}")
            log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 4
    except (PersFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
