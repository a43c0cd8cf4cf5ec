"""Experiment orchestration: seeded runs, grid search over a validation
split, artifact persistence, and comparison tables."""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as config_mod
from .data import Dataset, build_split, load_digits_dataset, load_examples_bin, make_blobs
from .exceptions import ConfigurationError, NonFiniteError
from .learners import Learner
from .metrics import MetricsMatrix, accuracy
from .nn import make_conv_net, make_mlp


def build_dataset(config):
    if config.dataset == "blobs":
        return make_blobs(
            num_classes=config.classes,
            dim=config.dim,
            train_per_class=config.train_per_class,
            test_per_class=config.test_per_class,
            separation=config.separation,
            modes_per_class=config.modes_per_class,
            seed=config.data_seed,
        )
    if config.dataset == "digits":
        # digits has only ~180 examples per class; cap the test carve-out
        return load_digits_dataset(test_per_class=min(config.test_per_class, 30),
                                   seed=config.data_seed)
    if config.dataset.startswith("file:"):
        x, y, num_classes = load_examples_bin(config.dataset[5:])
        # deterministic class-balanced 80/20 train/test partition
        rng = np.random.default_rng(config.data_seed)
        train_idx, test_idx = [], []
        for c in np.unique(y):
            c_idx = np.flatnonzero(y == c)
            c_idx = c_idx[rng.permutation(len(c_idx))]
            n_test = max(1, len(c_idx) // 5)
            test_idx.append(c_idx[:n_test])
            train_idx.append(c_idx[n_test:])
        train_idx = np.concatenate(train_idx)
        test_idx = np.concatenate(test_idx)
        return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx],
                       int(num_classes))
    raise ConfigurationError(f"unknown dataset {config.dataset!r}")


def build_network(config, rng):
    feature_shape = ((config.dim,) if config.dataset == "blobs" else None)
    if config.dataset == "digits":
        return make_conv_net((1, 8, 8), (8, 16), 10, rng,
                             embedding=config.learner.embedding)
    if feature_shape is None:
        # file datasets: infer flat dimensionality lazily
        dataset = build_dataset(config)
        feature_shape = dataset.train_x.shape[1:]
        if len(feature_shape) == 3:
            return make_conv_net(feature_shape, (8, 16), dataset.num_classes, rng,
                                 embedding=config.learner.embedding)
        return make_mlp(int(np.prod(feature_shape)), (64, 64), dataset.num_classes,
                        rng, embedding=config.learner.embedding)
    return make_mlp(config.dim, (64, 64), config.classes, rng,
                    embedding=config.learner.embedding)


def run_single(config, seed, out_path=None, eval_split="test"):
    """Train one (config, seed) pair and evaluate after every task.

    Returns a dict with the accuracy matrix, per-task eval rows, and the
    per-step loss log. Fully determined by (config, seed).
    """
    dataset = build_dataset(config)
    lc = dataclasses.replace(config.learner)
    if lc.method == "joint":
        stream = build_split(dataset, 1, 1.0, seed=seed,
                             batch_size=config.batch_size,
                             epochs_per_task=config.epochs,
                             val_fraction=config.val_fraction)
    else:
        stream = build_split(dataset, config.tasks, config.p_s, seed=seed,
                             batch_size=config.batch_size,
                             epochs_per_task=config.epochs,
                             val_fraction=config.val_fraction)
    net = build_network(config, np.random.default_rng([seed, 7]))
    learner = Learner(net, lc, np.random.default_rng([seed, 11]))
    batch_rng = np.random.default_rng([seed, 13])

    matrix = MetricsMatrix(stream.num_tasks)
    loss_rows = []
    step = 0
    for t in range(stream.num_tasks):
        learner.start_task(t, stream.classes_of(t))
        for epoch in range(config.epochs):
            for batch in stream.epoch_batches(t, batch_rng):
                bd = learner.step(batch)
                if not math.isfinite(bd.total):
                    raise NonFiniteError(
                        f"non-finite loss at task {t} epoch {epoch} step {step}: {bd}"
                    )
                loss_rows.append(
                    (step, t, epoch, bd.l_s, bd.l_u, bd.l_sm, bd.l_um, bd.total)
                )
                step += 1
        accs = []
        for i in range(t + 1):
            if eval_split == "validation":
                ex, ey = stream.validation_set(i)
            else:
                ex, ey = stream.test_set(i)
            preds = learner.predict(ex, stream.seen_classes(t))
            accs.append(accuracy(preds, ey))
        matrix.record_eval(t, accs)

    result = {"matrix": matrix, "loss_rows": loss_rows, "seed": seed}
    if out_path is not None:
        os.makedirs(out_path, exist_ok=True)
        matrix.to_csv(os.path.join(out_path, "metrics.csv"))
        _write_loss_log(os.path.join(out_path, "losses.csv"), loss_rows)
        if learner.buffer is not None and len(learner.buffer):
            learner.buffer.save(os.path.join(out_path, "buffer.bin"))
    return result


def _write_loss_log(path, rows):
    lines = ["step,task,epoch,l_s,l_u,l_sm,l_um,total"]
    for step, task, epoch, *vals in rows:
        lines.append(f"{step},{task},{epoch}," + ",".join(f"{v:.12f}" for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _worker(args):
    config, seed, out_path, eval_split = args
    result = run_single(config, seed, out_path, eval_split)
    return seed, result["matrix"]


def worker_count():
    return max(1, int(os.environ.get("WSCL_WORKERS", "1")))


def run(config, out_dir=None, eval_split="test"):
    """Execute all seeds of one config; returns the RunRecord dict."""
    t0 = time.perf_counter()
    out_dir = out_dir or config.out_dir
    cell = f"{config.learner.method}_m{config.learner.buffer_size}_p{config.p_s}"
    jobs = [
        (config, seed, os.path.join(out_dir, cell, f"seed{seed}"), eval_split)
        for seed in config.seeds
    ]
    if worker_count() > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=worker_count()) as pool:
            results = dict(pool.map(_worker, jobs))
    else:
        results = dict(_worker(job) for job in jobs)

    matrices = [results[s] for s in config.seeds]
    a_f = [m.final_accuracy() for m in matrices]
    forg = [m.forgetting() if m.num_tasks >= 2 else float("nan") for m in matrices]
    record = {
        "config_hash": config.config_hash(),
        "dataset": config.dataset,
        "tasks": config.tasks,
        "method": config.learner.method,
        "buffer_size": config.learner.buffer_size,
        "p_s": config.p_s,
        "seeds": list(config.seeds),
        "a_f": a_f,
        "forgetting": forg,
        "a_f_mean": float(np.mean(a_f)),
        "a_f_std": float(np.std(a_f, ddof=1)) if len(a_f) > 1 else 0.0,
        "wall_time_s": time.perf_counter() - t0,
    }
    with open(os.path.join(out_dir, cell, "record.json"), "w") as fh:
        json.dump(record, fh, indent=2)
    return record


def grid_search(config, grid, out_dir=None):
    """Pick the grid point with the best validation final accuracy.

    Ties break by lower forgetting, then by lexicographic order of the grid
    point's key=value assignment. Returns (best RunConfig, all point records).
    """
    if not grid:
        raise ConfigurationError("empty grid")
    out_dir = out_dir or config.out_dir
    keys = sorted(grid)
    points = list(itertools.product(*(grid[k] for k in keys)))
    records = []
    for values in points:
        point = dataclasses.replace(
            config, learner=dataclasses.replace(config.learner)
        )
        if point.val_fraction <= 0:
            point.val_fraction = 0.1
        assignment = dict(zip(keys, values))
        for key, raw in assignment.items():
            config_mod.apply_setting(point, key, raw)
        label = "_".join(f"{k}-{v}" for k, v in sorted(assignment.items()))
        record = run(point, out_dir=os.path.join(out_dir, "grid", label),
                     eval_split="validation")
        record["assignment"] = assignment
        record["point_label"] = label
        record["mean_forgetting"] = float(
            np.nanmean(record["forgetting"])
        ) if record["forgetting"] else 0.0
        records.append((point, record))

    def sort_key(item):
        _, rec = item
        return (-rec["a_f_mean"], rec["mean_forgetting"], rec["point_label"])

    records.sort(key=sort_key)
    with open(os.path.join(out_dir, "grid_records.json"), "w") as fh:
        json.dump([rec for _, rec in records], fh, indent=2)
    best_config, _ = records[0]
    best_config = dataclasses.replace(best_config, val_fraction=config.val_fraction)
    return best_config, [rec for _, rec in records]


def report(records):
    """Comparison table: rows method x buffer size, columns label rates.

    Returns (csv_text, aligned_text). All records must share dataset/tasks.
    """
    if not records:
        raise ConfigurationError("no records to report")
    datasets = {(r["dataset"], r["tasks"]) for r in records}
    if len(datasets) > 1:
        raise ConfigurationError(f"records mix datasets: {sorted(datasets)}")
    rates = sorted({r["p_s"] for r in records})
    rows = {}
    for r in records:
        label = f"{r['method']}_m{r['buffer_size']}"
        rows.setdefault(label, {})[r["p_s"]] = (r["a_f_mean"], r["a_f_std"])

    header = ["method"] + [f"p_s={p}" for p in rates]
    csv_lines = [",".join(header)]
    text_rows = [header]
    for label in sorted(rows):
        cells = []
        for p in rates:
            if p in rows[label]:
                mean, std = rows[label][p]
                cells.append(f"{100 * mean:.2f}±{100 * std:.2f}")
            else:
                cells.append("-")
        csv_lines.append(",".join([label] + cells))
        text_rows.append([label] + cells)

    widths = [max(len(row[i]) for row in text_rows) for i in range(len(header))]
    text_lines = [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
        for row in text_rows
    ]
    return "\n".join(csv_lines) + "\n", "\n".join(text_lines) + "\n"


def load_records(root):
    """Collect every record.json under ``root``."""
    records = []
    for dirpath, _, filenames in sorted(os.walk(root)):
        if "record.json" in filenames:
            with open(os.path.join(dirpath, "record.json")) as fh:
                records.append(json.load(fh))
    return records
