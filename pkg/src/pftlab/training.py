"""Multi-task pre-finetuning and downstream binary fine-tuning."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import SGD, ModelState, EncoderParams, backward_batch, cross_entropy_batch, forward_batch, init_head, init_model
from .sampling import FewShotSpec, TaskSampleStream, stable_seed

log = logging.getLogger(__name__)

TARGET_TASK = "target"


class TrainingError(RuntimeError):
    pass


def scaled_loss(raw: float, n: int) -> float:
    """Loss divided by ln of the label-space size."""
    if n < 2:
        raise ValueError(f"label-space size must be >= 2, got {n}")
    if raw < 0:
        raise ValueError(f"raw loss must be non-negative, got {raw}")
    return raw / math.log(n)


@dataclass
class PrefinetuneSpec:
    corpus_set: tuple[str, ...] = ()
    config_id: int = 1
    max_epochs: int = 200
    patience: int = 3
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 1
    hidden_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        self.corpus_set = tuple(self.corpus_set)
        if len(set(self.corpus_set)) != len(self.corpus_set):
            raise ValueError(f"duplicate corpora in {self.corpus_set}")
        if self.patience > self.max_epochs or self.patience < 1:
            raise ValueError("need 1 <= patience <= max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class FinetuneSpec:
    few_shot: FewShotSpec
    max_epochs: int = 200
    patience: int = 30
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.patience > self.max_epochs or self.patience < 1:
            raise ValueError("need 1 <= patience <= max_epochs")


@dataclass
class TrainState:
    best_validation_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    curve: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def epochs_run(self) -> int:
        # curve[0] is the loss before any training
        return max(0, len(self.curve) - 1)


class EarlyStopping:
    """Tracks the best loss; epoch 0 is the untrained model."""

    def __init__(self, patience: int, state: TrainState | None = None):
        self.patience = patience
        self.state = state or TrainState()

    def update(self, loss: float) -> bool:
        """Record the next epoch's loss; True if it is a new best."""
        st = self.state
        epoch = len(st.curve)
        st.curve.append(float(loss))
        if loss < st.best_validation_loss:
            st.best_validation_loss = float(loss)
            st.best_epoch = epoch
            st.epochs_since_improvement = 0
            return True
        st.epochs_since_improvement = epoch - st.best_epoch
        return False

    @property
    def should_stop(self) -> bool:
        return self.state.epochs_since_improvement >= self.patience


def early_stopping_trace(curve, patience: int) -> tuple[int, int]:
    """Replay a loss curve (index 0 = untrained); return (best_epoch, stop_epoch)."""
    es = EarlyStopping(patience)
    for loss in curve:
        es.update(loss)
        if es.should_stop:
            break
    return es.state.best_epoch, es.state.epochs_run


def validation_loss(model: ModelState, corpora, split: str = "validation") -> float:
    """Unweighted mean over tasks of each task's mean scaled loss."""
    corpora = list(corpora)
    if not corpora:
        raise ValueError("validation_loss needs at least one corpus")
    per_task = []
    for c in corpora:
        X, y = c.split(split)
        if not len(y):
            raise ValueError(f"{c.name}: empty {split} split")
        raw = cross_entropy_batch(forward_batch(model, c.name, X), y)
        # fsum is correctly rounded, so repeating a task's rows leaves its mean unchanged bit for bit
        per_task.append(math.fsum(raw) / len(raw) / math.log(c.label_space.n))
    return math.fsum(per_task) / len(per_task)


class _InstanceCycler:
    """Cycles through a task's training rows, reshuffling after each pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> int:
        if self.pos == self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        i = self.order[self.pos]
        self.pos += 1
        return int(i)


def _check_finite(loss: float, what: str) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite {what}: {loss}")


def prefinetune(spec: PrefinetuneSpec, corpora) -> tuple[ModelState, TrainState]:
    """Multi-task training with one head per corpus and uniformly sampled tasks.

    One epoch is ``sum(len(train split))`` steps.  The encoder is seeded by
    ``spec.seed`` alone, so every config starts from the same encoder.
    Returns the parameters of the epoch with the lowest validation loss.
    """
    by_name = {c.name: c for c in corpora}
    missing = [n for n in spec.corpus_set if n not in by_name]
    if missing:
        raise ValueError(f"corpora {missing} required by config {spec.config_id} were not supplied")
    selected = [by_name[n] for n in spec.corpus_set]
    dims = {c.dim for c in by_name.values()}
    if len(dims) > 1:
        raise ValueError(f"corpora disagree on feature dimension: {sorted(dims)}")
    input_dim = dims.pop() if dims else None
    if input_dim is None:
        raise ValueError("at least one corpus is needed to fix the input dimension")

    model = init_model(input_dim, spec.hidden_dim, {c.name: c.label_space.n for c in selected}, spec.seed)
    state = TrainState()
    if not selected:
        return model, state

    stream = TaskSampleStream(spec.corpus_set, stable_seed("tasks", spec.seed, spec.config_id))
    inst_rng = np.random.default_rng(stable_seed("instances", spec.seed, spec.config_id))
    train = {c.name: c.split("train") for c in selected}
    cyclers = {n: _InstanceCycler(len(y), inst_rng) for n, (_, y) in train.items()}
    inv_log_n = {c.name: 1.0 / math.log(c.label_space.n) for c in selected}
    steps_per_epoch = sum(len(y) for _, y in train.values())
    opt = SGD(spec.lr, spec.momentum)
    es = EarlyStopping(spec.patience, state)

    es.update(validation_loss(model, selected))
    best = model.copy()
    for epoch in range(1, spec.max_epochs + 1):
        running = 0.0
        for _ in range(0, steps_per_epoch, spec.batch_size):
            task = stream.sample_task()
            X, y = train[task]
            try:
                if spec.batch_size == 1:
                    i = cyclers[task].next()
                    running += opt.train_step(model, task, X[i], int(y[i]), inv_log_n[task])
                else:
                    rows = [cyclers[task].next() for _ in range(spec.batch_size)]
                    g = backward_batch(model, task, X[rows], y[rows], inv_log_n[task])
                    running += g.loss
                    opt.step(model, g)
            except FloatingPointError as exc:
                raise TrainingError(f"config {spec.config_id}, epoch {epoch}: {exc}") from None
            state.steps += 1
        val = validation_loss(model, selected)
        _check_finite(val, f"validation loss (config {spec.config_id}, epoch {epoch})")
        if es.update(val):
            best = model.copy()
        log.debug("config %d epoch %d train %.4f val %.4f", spec.config_id, epoch,
                  running / max(1, steps_per_epoch // spec.batch_size), val)
        if es.should_stop:
            break
    return best, state


def training_loss(model: ModelState, X: np.ndarray, y: np.ndarray, task: str = TARGET_TASK) -> float:
    return float(np.mean(cross_entropy_batch(forward_batch(model, task, X), y)))


def finetune(base: ModelState, X: np.ndarray, y: np.ndarray, spec: FinetuneSpec) -> tuple[ModelState, TrainState]:
    """Full fine-tuning of ``base``'s encoder plus a fresh binary head.

    Pre-finetuning heads are dropped.  Early stopping watches the few-shot
    training loss (there is no validation split at k=2).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != base.encoder.input_dim:
        raise ValueError(f"train set shape {X.shape} does not match encoder input {base.encoder.input_dim}")
    if len(X) != len(y) or not len(y):
        raise ValueError("train set must be non-empty with one label per row")
    rng = np.random.default_rng(spec.seed)
    enc = EncoderParams(base.encoder.W1.copy(), base.encoder.b1.copy())
    model = ModelState(enc)
    model.add_head(init_head(TARGET_TASK, 2, enc.hidden_dim, rng))

    state = TrainState()
    es = EarlyStopping(spec.patience, state)
    opt = SGD(spec.lr, spec.momentum)
    es.update(training_loss(model, X, y))
    best = model.copy()
    for epoch in range(1, spec.max_epochs + 1):
        for i in rng.permutation(len(y)):
            try:
                opt.train_step(model, TARGET_TASK, X[i], int(y[i]))
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from None
            state.steps += 1
        loss = training_loss(model, X, y)
        _check_finite(loss, f"training loss (epoch {epoch})")
        if es.update(loss):
            best = model.copy()
        if es.should_stop:
            break
    return best, state
