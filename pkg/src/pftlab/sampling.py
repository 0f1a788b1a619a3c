"""Reproducible task sampling and few-shot sampling.

Every random stream is seeded from a stable hash of the fields that
identify it, so trials can run in any order, in any process.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import Corpus

FEW_SHOT_KS = (2, 4, 8, 16, 24, 32, 64)
TRIALS_PER_CONDITION = 3


def stable_seed(*parts) -> int:
    """64-bit seed from the repr of ``parts``; identical across runs and platforms."""
    blob = "\x1f".join(repr(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def trial_seed(global_seed: int, config_id: int, speaker: str, emotion: str, k: int, trial_index: int) -> int:
    return stable_seed("trial", global_seed, config_id, speaker, emotion, k, trial_index)


class TaskSampleStream:
    """Uniform draws over a fixed task list."""

    def __init__(self, tasks, seed: int):
        self.tasks = list(tasks)
        if not self.tasks:
            raise ValueError("task stream needs at least one task")
        self.rng = np.random.default_rng(seed)

    def sample_task(self) -> str:
        return self.tasks[int(self.rng.integers(len(self.tasks)))]

    def __iter__(self):
        while True:
            yield self.sample_task()


def sample_task(stream: TaskSampleStream) -> str:
    return stream.sample_task()


class InsufficientPoolError(ValueError):
    pass


@dataclass(frozen=True)
class FewShotSpec:
    speaker_id: str
    emotion: str
    k: int
    trial_index: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.k <= 0 or self.k % 2:
            raise ValueError(f"k must be a positive even integer, got {self.k}")
        if self.trial_index < 0:
            raise ValueError(f"trial_index must be >= 0, got {self.trial_index}")


def sample_fewshot(corpus: Corpus, spec: FewShotSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw k/2 positives and k/2 negatives from the speaker's train pool.

    Returns ``(indices, features, binary_labels)``; ``indices`` point into
    ``corpus`` and are ordered positives first.  Negatives are drawn
    uniformly from all other emotions pooled.
    """
    if spec.emotion not in corpus.label_space.names:
        raise KeyError(f"unknown emotion {spec.emotion!r}; corpus has {corpus.label_space.names}")
    pool = corpus.split_indices("train")
    pool = pool[corpus.speakers[pool] == spec.speaker_id]
    if not len(pool) and spec.speaker_id not in corpus.speaker_ids:
        raise KeyError(f"unknown speaker {spec.speaker_id!r}")
    target = corpus.label_space.index(spec.emotion)
    pos_pool = pool[corpus.labels[pool] == target]
    neg_pool = pool[corpus.labels[pool] != target]
    half = spec.k // 2
    if len(pos_pool) < half or len(neg_pool) < half:
        raise InsufficientPoolError(
            f"speaker {spec.speaker_id!r}, emotion {spec.emotion!r}: need {half}+{half}, "
            f"pool has {len(pos_pool)} positive / {len(neg_pool)} negative")
    rng = np.random.default_rng(stable_seed("fewshot", spec.seed, spec.speaker_id, spec.emotion,
                                            spec.k, spec.trial_index))
    pos = rng.choice(pos_pool, size=half, replace=False)
    neg = rng.choice(neg_pool, size=half, replace=False)
    idx = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(half, dtype=np.int64), np.zeros(half, dtype=np.int64)])
    return idx, corpus.features[idx], y
