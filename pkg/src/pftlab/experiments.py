"""Power-set configs, trial grid planning, the results store and the grid runner."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Corpus, load_corpus
from .kernel import ModelState, load_checkpoint, predict
from .metrics import constant_baseline, macro_f1
from .sampling import FEW_SHOT_KS, TRIALS_PER_CONDITION, FewShotSpec, sample_fewshot, trial_seed
from .training import TARGET_TASK, FinetuneSpec, TrainingError, finetune

log = logging.getLogger(__name__)

STORE_FIELDS = ("config_id", "speaker", "emotion", "k", "trial_index", "seed", "macro_f1",
                "per_class_f1", "baseline_f1", "status", "epochs", "wall_ms")


@dataclass(frozen=True)
class PrefinetuneConfig:
    config_id: int
    corpora: tuple[str, ...]

    @property
    def n_corpora(self) -> int:
        return len(self.corpora)


def enumerate_powerset(corpora) -> list[PrefinetuneConfig]:
    """All subsets ordered by size then lexically; config ids start at 1 (the empty set)."""
    names = list(corpora)
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate corpus names: {names}")
    ordered = sorted(names)
    subsets = [c for r in range(len(ordered) + 1) for c in itertools.combinations(ordered, r)]
    return [PrefinetuneConfig(j, s) for j, s in enumerate(subsets, start=1)]


@dataclass(frozen=True)
class TrialSpec:
    config_id: int
    speaker: str
    emotion: str
    k: int
    trial_index: int
    seed: int

    @property
    def key(self) -> tuple:
        return (self.config_id, self.speaker, self.emotion, self.k, self.trial_index)


@dataclass
class GridPlan:
    trials: list[TrialSpec]
    global_seed: int = 0

    @property
    def plan_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.trials:
            h.update(repr(asdict(t)).encode())
        return h.hexdigest()[:16]

    def __len__(self) -> int:
        return len(self.trials)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"plan_hash": self.plan_hash, "global_seed": self.global_seed,
                                "count": len(self)}) + "\n")
            for t in self.trials:
                f.write(json.dumps(asdict(t)) + "\n")

    @classmethod
    def load(cls, path) -> "GridPlan":
        with open(path) as f:
            header = json.loads(f.readline())
            trials = [TrialSpec(**json.loads(line)) for line in f if line.strip()]
        plan = cls(trials, header["global_seed"])
        if plan.plan_hash != header["plan_hash"]:
            raise ValueError(f"{path}: plan hash mismatch")
        return plan


def plan_grid(configs, speakers, emotions, ks=FEW_SHOT_KS, trials: int = TRIALS_PER_CONDITION,
              global_seed: int = 0) -> GridPlan:
    """Full cross product configs x speakers x emotions x ks x trial indices."""
    ids = [c.config_id if isinstance(c, PrefinetuneConfig) else int(c) for c in configs]
    dims = {"configs": ids, "speakers": list(speakers), "emotions": list(emotions), "ks": list(ks)}
    for name, vals in dims.items():
        if not vals:
            raise ValueError(f"empty grid dimension: {name}")
        if len(set(vals)) != len(vals):
            raise ValueError(f"duplicate values in grid dimension {name}")
    if trials < 1:
        raise ValueError("empty grid dimension: trials")
    out = [TrialSpec(j, s, e, k, t, trial_seed(global_seed, j, s, e, k, t))
           for j in ids for s in dims["speakers"] for e in dims["emotions"]
           for k in dims["ks"] for t in range(trials)]
    return GridPlan(out, global_seed)


# ---------------------------------------------------------------- results store


@dataclass
class TrialRecord:
    config_id: int
    speaker: str
    emotion: str
    k: int
    trial_index: int
    seed: int
    macro_f1: float | None
    per_class_f1: list[float] | None
    baseline_f1: float | None
    status: str
    epochs: int
    wall_ms: int
    error: str | None = None

    @property
    def key(self) -> tuple:
        return (self.config_id, self.speaker, self.emotion, self.k, self.trial_index)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def content(self) -> tuple:
        """Everything except wall time, which is the only scheduling-dependent field."""
        d = asdict(self)
        d.pop("wall_ms")
        return tuple((k, tuple(v) if isinstance(v, list) else v) for k, v in d.items())

    def to_dict(self) -> dict:
        d = {f: getattr(self, f) for f in STORE_FIELDS}
        if self.error is not None:
            d["error"] = self.error
        return d


def _encode_line(obj: dict) -> str:
    body = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return f"{body}\t{zlib.crc32(body.encode()):08x}\n"


def _decode_line(line: str) -> dict | None:
    if not line.endswith("\n"):
        return None
    body, sep, crc = line.rstrip("\n").rpartition("\t")
    if not sep or crc != f"{zlib.crc32(body.encode()):08x}":
        return None
    return json.loads(body)


class ResultsStore:
    """Append-only JSON-lines log; every line ends in a CRC32 of its body.

    The first line is a header carrying the plan hash.  Lines that fail the
    check (torn writes from a crash) are dropped on load and truncated away
    before the next append.
    """

    def __init__(self, path, plan_hash: str | None = None):
        self.path = Path(path)
        self.plan_hash = plan_hash
        self.records: dict[tuple, TrialRecord] = {}
        self.failed: dict[tuple, TrialRecord] = {}
        self.discarded = 0
        if self.path.exists():
            self._load()
        elif plan_hash is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w") as f:
                f.write(_encode_line({"kind": "header", "plan_hash": plan_hash}))

    def _load(self) -> None:
        good_bytes = 0
        with open(self.path, newline="") as f:
            for line in f:
                obj = _decode_line(line)
                if obj is None:
                    self.discarded += 1
                    continue
                good_bytes += len(line.encode())
                if obj.get("kind") == "header":
                    if self.plan_hash is not None and obj["plan_hash"] != self.plan_hash:
                        raise ValueError(f"{self.path}: store belongs to plan {obj['plan_hash']}, "
                                         f"not {self.plan_hash}")
                    self.plan_hash = obj["plan_hash"]
                    continue
                self._index(TrialRecord(**obj))
        if self.discarded:
            log.warning("%s: discarded %d corrupt line(s)", self.path, self.discarded)
            self._rewrite()

    def _rewrite(self) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w") as f:
            if self.plan_hash is not None:
                f.write(_encode_line({"kind": "header", "plan_hash": self.plan_hash}))
            for rec in list(self.records.values()) + list(self.failed.values()):
                f.write(_encode_line(rec.to_dict()))
        tmp.replace(self.path)

    def _index(self, rec: TrialRecord) -> None:
        if rec.ok:
            self.records[rec.key] = rec
            self.failed.pop(rec.key, None)
        elif rec.key not in self.records:
            self.failed[rec.key] = rec

    def append(self, rec: TrialRecord) -> None:
        if rec.ok and rec.key in self.records:
            raise ValueError(f"duplicate ok record for {rec.key}")
        with open(self.path, "a") as f:
            f.write(_encode_line(rec.to_dict()))
            f.flush()
            os.fsync(f.fileno())
        self._index(rec)

    def done(self, key: tuple) -> bool:
        return key in self.records or key in self.failed

    def ok_records(self) -> list[TrialRecord]:
        return list(self.records.values())

    def all_records(self) -> list[TrialRecord]:
        return list(self.records.values()) + list(self.failed.values())


# ---------------------------------------------------------------- trial execution


@dataclass(frozen=True)
class TrialSettings:
    max_epochs: int = 200
    patience: int = 30
    lr: float = 0.05
    momentum: float = 0.9


def run_trial(spec: TrialSpec, model: ModelState, downstream: Corpus, settings: TrialSettings,
              global_seed: int) -> TrialRecord:
    t0 = time.perf_counter()
    fs = FewShotSpec(spec.speaker, spec.emotion, spec.k, spec.trial_index, global_seed)
    epochs = 0
    try:
        _, X, y = sample_fewshot(downstream, fs)
        ft = FinetuneSpec(fs, settings.max_epochs, settings.patience, settings.lr, settings.momentum, spec.seed)
        clf, state = finetune(model, X, y, ft)
        epochs = state.epochs_run
        test = downstream.split_indices("test")
        test = test[downstream.speakers[test] == spec.speaker]
        y_test = (downstream.labels[test] == downstream.label_space.index(spec.emotion)).astype(np.int64)
        rep = macro_f1(predict(clf, TARGET_TASK, downstream.features[test]), y_test)
        status, f1, per_class, base, err = "ok", rep.macro_f1, list(rep.per_class_f1), constant_baseline(y_test), None
    except TrainingError as exc:
        status, f1, per_class, base, err = "failed", None, None, None, str(exc)
    wall_ms = int(round((time.perf_counter() - t0) * 1000))
    return TrialRecord(spec.config_id, spec.speaker, spec.emotion, spec.k, spec.trial_index, spec.seed,
                       f1, per_class, base, status, epochs, wall_ms, err)


class _Worker:
    """Per-process cache of the downstream corpus and checkpoints."""

    state: dict = {}

    @classmethod
    def init(cls, downstream_dir, checkpoints, settings, global_seed):
        cls.state = {"downstream": load_corpus(downstream_dir), "paths": checkpoints, "models": {},
                     "settings": settings, "seed": global_seed}

    @classmethod
    def run(cls, spec: TrialSpec) -> TrialRecord:
        st = cls.state
        model = st["models"].get(spec.config_id)
        if model is None:
            model = st["models"][spec.config_id] = load_checkpoint(st["paths"][spec.config_id])
        return run_trial(spec, model, st["downstream"], st["settings"], st["seed"])


def run_grid(plan: GridPlan, checkpoints: dict[int, str | Path], downstream_dir, store_path,
             parallelism: int = 1, settings: TrialSettings | None = None, max_trials: int | None = None,
             progress=None) -> ResultsStore:
    """Execute every trial in ``plan`` not already in the store.

    ``checkpoints`` maps config_id to a checkpoint path.  The calling
    process is the only writer.  ``max_trials`` caps new work (used to
    stage partial runs).
    """
    settings = settings or TrialSettings()
    checkpoints = {int(j): str(p) for j, p in checkpoints.items()}
    needed = {t.config_id for t in plan.trials}
    missing = sorted(j for j in needed if j not in checkpoints or not Path(checkpoints[j]).exists())
    if missing:
        raise FileNotFoundError(f"missing checkpoints for config ids {missing}")
    store = ResultsStore(store_path, plan.plan_hash)
    todo = [t for t in plan.trials if not store.done(t.key)]
    if max_trials is not None:
        todo = todo[:max_trials]
    log.info("%d of %d trials to run (parallelism %d)", len(todo), len(plan), parallelism)
    if not todo:
        return store
    init_args = (str(downstream_dir), checkpoints, settings, plan.global_seed)
    if parallelism <= 1:
        _Worker.init(*init_args)
        results = map(_Worker.run, todo)
        for i, rec in enumerate(results, 1):
            store.append(rec)
            if progress:
                progress(i, len(todo))
    else:
        with ProcessPoolExecutor(parallelism, initializer=_Worker.init, initargs=init_args) as pool:
            for i, rec in enumerate(pool.map(_Worker.run, todo, chunksize=4), 1):
                store.append(rec)
                if progress:
                    progress(i, len(todo))
    return store
