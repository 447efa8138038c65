"""Experiment protocol: early stopping, run records, random search, summaries."""

import csv
import json
import logging
import math
import os
import threading
import time
import traceback
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class EarlyStopping:
    """Patience-based stopping that remembers the best weights.

    ``update`` returns True once ``patience`` consecutive epochs have failed
    to strictly improve on the best value.
    """

    def __init__(self, patience=3, mode="max", min_delta=0.0):
        if mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {mode!r}")
        self.patience = patience
        self.mode = mode
        self.min_delta = min_delta
        self.best = -math.inf if mode == "max" else math.inf
        self.best_epoch = None
        self.best_state = None
        self.wait = 0

    def improved(self, value):
        if self.mode == "max":
            return value > self.best + self.min_delta
        return value < self.best - self.min_delta

    def update(self, epoch, value, state=None):
        if self.improved(value):
            self.best, self.best_epoch, self.wait = value, epoch, 0
            self.best_state = state() if callable(state) else state
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class RunRecord:
    run_id: int = 0
    status: str = "ok"
    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_value: float = None
    checkpoint: str = None
    seconds: float = None
    message: str = None

    def to_json(self):
        d = asdict(self)
        if d["message"] is None:
            del d["message"]
        return json.dumps(d, sort_keys=False)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def extremal(self, mode):
        vals = [e["val_metric"] for e in self.epochs]
        return max(vals) if mode == "max" else min(vals)


@dataclass
class SearchSpace:
    axes: dict
    run_count: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.run_count < 1:
            raise ValueError("run_count must be >= 1")
        for name, values in self.axes.items():
            if not values:
                raise ValueError(f"axis {name!r} has no candidate values")

    def cardinality(self):
        return math.prod(len(v) for v in self.axes.values())

    def contains(self, config):
        return set(config) == set(self.axes) and all(config[k] in self.axes[k] for k in config)


def sample_config(space, run_index):
    """Independent uniform draw per axis from a stream keyed by (seed, run_index)."""
    if not 0 <= run_index < space.run_count:
        raise IndexError(f"run_index {run_index} outside [0, {space.run_count})")
    rng = np.random.default_rng([space.seed, run_index])
    out = {}
    for name, values in space.axes.items():
        v = values[int(rng.integers(len(values)))]
        out[name] = v.item() if isinstance(v, np.generic) else v
    return out


def default_spaces(run_count=30, seed=0):
    """(custom CNN, transfer head, instruction model) search spaces.

    ``regularization`` for the CNN means L2 1e-3 on the hidden dense layer
    plus dropout 0.7 before the output; for the instruction model it means
    dropout 0.8, L2 1e-2 and layer normalization. ``pretrained`` is the GloVe
    width, 0 for a learned embedding.
    """
    cnn = SearchSpace({
        "batch_size": [32, 64, 128],
        "blocks": [3, 4, 5],
        "learning_rate": [1e-3, 1e-4, 1e-5],
        "augmentation": [True, False],
        "regularization": [True, False],
    }, run_count, seed)
    transfer = SearchSpace({
        "batch_size": [32, 128, 512],
        "learning_rate": [1e-3, 1e-4, 1e-5],
        "augmentation": [True, False],
        "dropout": [0.0, 0.3, 0.7],
    }, run_count, seed)
    instruction = SearchSpace({
        "units": [8, 16, 32, 64],
        "learning_rate": [1e-1, 1e-2, 1e-3, 5e-4, 1e-4],
        "batch_size": [8, 16, 32, 64],
        "pretrained": [0, 50, 100],
        "regularization": [True, False],
    }, run_count, seed)
    return cnn, transfer, instruction


def read_records(path):
    if not os.path.exists(path):
        return []
    with open(path, encoding="utf-8") as fh:
        return [RunRecord.from_json(ln) for ln in fh if ln.strip()]


def write_records(records, path):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in sorted(records, key=lambda r: r.run_id):
            fh.write(r.to_json() + "\n")
    os.replace(tmp, path)


def run_search(space, trainer, log_path, workers=1, record_time=False):
    """Run every missing ``run_id`` in ``range(space.run_count)``.

    ``trainer(config, run_id)`` returns a RunRecord. Each record is appended
    to ``log_path`` as soon as it finishes; a trainer exception produces a
    ``failed`` record and the search carries on. Run ids already in the log
    are skipped, so an interrupted search resumes where it stopped. On
    completion the log is rewritten in run_id order.
    """
    existing = {r.run_id: r for r in read_records(log_path)}
    todo = [i for i in range(space.run_count) if i not in existing]
    lock = threading.Lock()

    def one(run_id):
        config = sample_config(space, run_id)
        start = time.perf_counter()
        try:
            rec = trainer(dict(config), run_id)
            rec.run_id, rec.config = run_id, config
        except Exception as exc:  # recorded, never propagated
            log.warning("run %d failed: %s", run_id, exc)
            rec = RunRecord(run_id=run_id, status="failed", config=config,
                            message=f"{type(exc).__name__}: {exc}")
            log.debug("%s", traceback.format_exc())
        rec.seconds = round(time.perf_counter() - start, 3) if record_time else None
        with lock:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
        return rec

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(one, todo))
    else:
        fresh = [one(i) for i in todo]
    for rec in fresh:
        existing[rec.run_id] = rec
    records = [existing[k] for k in sorted(existing)]
    write_records(records, log_path)
    return records


def select_best(records, mode="max"):
    ok = [r for r in records if r.status == "ok" and r.best_value is not None]
    if not ok:
        raise ValueError("no successful runs to select from")
    sign = 1 if mode == "max" else -1
    return min(ok, key=lambda r: (-sign * r.best_value, r.run_id))


def summarize_by_axis(records, axis):
    """value -> (mean best_value, count) over successful records."""
    ok = [r for r in records if r.status == "ok" and r.best_value is not None]
    if records and not any(axis in r.config for r in records):
        raise KeyError(f"unknown axis {axis!r}")
    groups = defaultdict(list)
    for r in ok:
        if axis not in r.config:
            raise KeyError(f"run {r.run_id} has no axis {axis!r}")
        groups[json.dumps(r.config[axis])].append(r.best_value)
    return {json.loads(k): (sum(v) / len(v), len(v)) for k, v in sorted(groups.items())}


def write_summary_csv(summary, axis, out):
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["axis", "value", "mean_best", "count"])
    for value, (mean, count) in summary.items():
        w.writerow([axis, json.dumps(value), repr(mean), count])
