"""Two-layer feed-forward classifier with one linear head per task.

The encoder is ``h = relu(W1 @ x + b1)``; each task owns a head
``logits = W @ h + b``.  Gradients are written out by hand (no graph),
everything is float64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class UnknownTaskError(KeyError):
    pass


@dataclass
class EncoderParams:
    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]


@dataclass
class HeadParams:
    W: np.ndarray  # (n_labels, hidden)
    b: np.ndarray  # (n_labels,)
    task_id: str

    @property
    def n_labels(self) -> int:
        return self.W.shape[0]


@dataclass
class ModelState:
    encoder: EncoderParams
    heads: dict[str, HeadParams] = field(default_factory=dict)

    def __post_init__(self):
        hid = self.encoder.hidden_dim
        if self.encoder.W1.ndim != 2 or min(self.encoder.W1.shape) < 1:
            raise ShapeError(f"encoder W1 must be a non-empty matrix, got {self.encoder.W1.shape}")
        if self.encoder.b1.shape != (hid,):
            raise ShapeError(f"encoder b1 shape {self.encoder.b1.shape} != ({hid},)")
        for task_id, head in self.heads.items():
            self._check_head(task_id, head)

    def _check_head(self, task_id: str, head: HeadParams) -> None:
        hid = self.encoder.hidden_dim
        if head.task_id != task_id:
            raise ValueError(f"head keyed as {task_id!r} is bound to {head.task_id!r}")
        if head.W.ndim != 2 or head.W.shape[1] != hid:
            raise ShapeError(f"head {task_id!r} expects hidden {head.W.shape}, encoder has {hid}")
        if head.n_labels < 2:
            raise ShapeError(f"head {task_id!r} needs >= 2 labels")
        if head.b.shape != (head.n_labels,):
            raise ShapeError(f"head {task_id!r} bias shape {head.b.shape}")

    def add_head(self, head: HeadParams) -> None:
        if head.task_id in self.heads:
            raise ValueError(f"duplicate head {head.task_id!r}")
        self._check_head(head.task_id, head)
        self.heads[head.task_id] = head

    def head(self, task_id: str) -> HeadParams:
        try:
            return self.heads[task_id]
        except KeyError:
            raise UnknownTaskError(f"unknown task {task_id!r}; model has {sorted(self.heads)}") from None

    def copy(self) -> "ModelState":
        enc = EncoderParams(self.encoder.W1.copy(), self.encoder.b1.copy())
        heads = {t: HeadParams(h.W.copy(), h.b.copy(), t) for t, h in self.heads.items()}
        return ModelState(enc, heads)

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters in declaration order: encoder, then heads in insertion order."""
        yield "encoder.W1", self.encoder.W1
        yield "encoder.b1", self.encoder.b1
        for t, h in self.heads.items():
            yield f"heads.{t}.W", h.W
            yield f"heads.{t}.b", h.b

    def equals(self, other: "ModelState") -> bool:
        a = list(self.named_params())
        b = list(other.named_params())
        return [n for n, _ in a] == [n for n, _ in b] and all(
            x.shape == y.shape and np.array_equal(x, y) for (_, x), (_, y) in zip(a, b)
        )


def init_encoder(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> EncoderParams:
    if input_dim < 1 or hidden_dim < 1:
        raise ShapeError("encoder dimensions must be positive")
    s = 1.0 / np.sqrt(input_dim)
    return EncoderParams(rng.uniform(-s, s, size=(hidden_dim, input_dim)), np.zeros(hidden_dim))


def init_head(task_id: str, n_labels: int, hidden_dim: int, rng: np.random.Generator) -> HeadParams:
    if n_labels < 2:
        raise ShapeError("a head needs at least 2 labels")
    s = 1.0 / np.sqrt(hidden_dim)
    return HeadParams(rng.uniform(-s, s, size=(n_labels, hidden_dim)), np.zeros(n_labels), task_id)


def init_model(input_dim: int, hidden_dim: int, tasks: dict[str, int], seed: int) -> ModelState:
    """Fresh model; ``tasks`` maps task id to label count, heads created in that order."""
    rng = np.random.default_rng(seed)
    model = ModelState(init_encoder(input_dim, hidden_dim, rng))
    for task_id, n in tasks.items():
        model.add_head(init_head(task_id, n, hidden_dim, rng))
    return model


# ---------------------------------------------------------------- forward / loss


def _as_batch(model: ModelState, x: np.ndarray) -> np.ndarray:
    X = np.asarray(x, dtype=DTYPE)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.encoder.input_dim:
        raise ShapeError(f"input has shape {np.shape(x)}, encoder expects dim {model.encoder.input_dim}")
    return X


def encode(model: ModelState, X: np.ndarray) -> np.ndarray:
    X = _as_batch(model, X)
    return np.maximum(X @ model.encoder.W1.T + model.encoder.b1, 0.0)


def forward_batch(model: ModelState, task: str, X: np.ndarray) -> np.ndarray:
    head = model.head(task)
    return encode(model, X) @ head.W.T + head.b


def forward(model: ModelState, task: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 1:
        raise ShapeError(f"forward takes a single vector, got shape {x.shape}")
    return forward_batch(model, task, x)[0]


def predict(model: ModelState, task: str, X: np.ndarray) -> np.ndarray:
    # np.argmax breaks ties toward the lowest index
    return np.argmax(forward_batch(model, task, X), axis=1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=DTYPE)
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} out of range for {logits.shape[-1]} classes")
    # clamp -0.0 / tiny negative rounding
    return max(0.0, -float(log_softmax(logits)[label]))


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise IndexError(f"label out of range for {n} classes")
    ls = log_softmax(logits)
    return np.maximum(-ls[np.arange(len(labels)), labels], 0.0)


# ---------------------------------------------------------------- gradients


@dataclass
class Gradients:
    """Gradients for the encoder and the single head a sample was routed to."""

    task: str
    W1: np.ndarray
    b1: np.ndarray
    W: np.ndarray
    b: np.ndarray
    loss: float = 0.0

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "encoder.W1", self.W1
        yield "encoder.b1", self.b1
        yield f"heads.{self.task}.W", self.W
        yield f"heads.{self.task}.b", self.b


def backward_batch(model: ModelState, task: str, X: np.ndarray, labels, scale: float = 1.0) -> Gradients:
    """Gradient of ``scale * mean_i CE(forward(x_i), y_i)``."""
    head = model.head(task)
    X = _as_batch(model, X)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} inputs but {labels.shape[0]} labels")
    enc = model.encoder
    z = X @ enc.W1.T + enc.b1
    h = np.maximum(z, 0.0)
    logits = h @ head.W.T + head.b
    ls = log_softmax(logits)
    rows = np.arange(len(labels))
    if labels.min() < 0 or labels.max() >= head.n_labels:
        raise IndexError(f"label out of range for {head.n_labels} classes")
    loss = float(np.maximum(-ls[rows, labels], 0.0).mean()) * scale

    d_logits = np.exp(ls)
    d_logits[rows, labels] -= 1.0
    d_logits *= scale / len(labels)
    dW = d_logits.T @ h
    db = d_logits.sum(axis=0)
    dz = (d_logits @ head.W) * (z > 0)
    dW1 = dz.T @ X
    db1 = dz.sum(axis=0)
    return Gradients(task, dW1, db1, dW, db, loss)


def backward(model: ModelState, task: str, x: np.ndarray, label: int, scale: float = 1.0) -> Gradients:
    return backward_batch(model, task, np.asarray(x, dtype=DTYPE)[None, :], [label], scale)


# ---------------------------------------------------------------- optimizer


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float, momentum: float = 0.0,
             velocity: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One heavy-ball step: ``v = momentum * v + g``, ``p = p - lr * v``.

    Returns new (param, velocity); inputs are not modified.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    param = np.asarray(param, dtype=DTYPE)
    grad = np.asarray(grad, dtype=DTYPE)
    if param.shape != grad.shape:
        raise ShapeError(f"param shape {param.shape} != grad shape {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    v = grad.copy() if velocity is None else momentum * velocity + grad
    return param - lr * v, v


class SGD:
    """Momentum SGD updating a ModelState in place; velocity buffers are keyed by parameter name."""

    def __init__(self, lr: float = 0.05, momentum: float = 0.9):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: ModelState, grads: Gradients) -> None:
        if self.lr == 0:
            return
        head = model.head(grads.task)
        targets = {
            "encoder.W1": model.encoder.W1,
            "encoder.b1": model.encoder.b1,
            f"heads.{grads.task}.W": head.W,
            f"heads.{grads.task}.b": head.b,
        }
        for name, g in grads.named():
            p = targets[name]
            if p.shape != g.shape:
                raise ShapeError(f"{name}: param {p.shape} vs grad {g.shape}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for {name}")
            self._update(name, p, g)

    def _update(self, name: str, p: np.ndarray, g: np.ndarray) -> None:
        v = self.velocity.get(name)
        if v is None:
            v = self.velocity[name] = g.copy()
        else:
            v *= self.momentum
            v += g
        p -= self.lr * v

    def train_step(self, model: ModelState, task: str, x: np.ndarray, label: int, scale: float = 1.0) -> float:
        """Fused single-instance backward + step; same arithmetic as ``backward`` then ``step``.

        Hot path of both training loops, so shape checks are skipped.
        Returns the scaled loss before the update.
        """
        head = model.head(task)
        W1, b1, W, b = model.encoder.W1, model.encoder.b1, head.W, head.b
        z = W1 @ x
        z += b1
        mask = z > 0
        h = z * mask
        lg = W @ h
        lg += b
        lg -= lg.max()
        e = np.exp(lg)
        s = e.sum()
        loss = max(0.0, float(np.log(s) - lg[label])) * scale
        e *= scale / s
        e[label] -= scale
        dz = (e @ W) * mask
        if not (np.isfinite(loss) and np.isfinite(dz).all()):
            raise FloatingPointError(f"non-finite loss/gradient on task {task!r}")
        if self.lr == 0:
            return loss
        self._update("encoder.W1", W1, np.multiply.outer(dz, x))
        self._update("encoder.b1", b1, dz)
        self._update(f"heads.{task}.W", W, np.multiply.outer(e, h))
        self._update(f"heads.{task}.b", b, e)
        return loss


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_relative_error: float
    errors: list[tuple[str, float]]


def relative_error(a: float, b: float, floor: float = 1e-12) -> float:
    if abs(a) < floor and abs(b) < floor:
        return 0.0
    return abs(a - b) / max(abs(a), abs(b))


def _mean_loss(model: ModelState, samples) -> float:
    total = 0.0
    for task, x, y in samples:
        total += cross_entropy(forward(model, task, x), y)
    return total / len(samples)


def grad_check(model: ModelState, samples, eps: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of the mean loss over ``samples`` with central differences.

    ``samples`` is a sequence of ``(task, x, label)``.  Each entry in
    ``errors`` is the largest elementwise relative error for one parameter.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("grad_check needs at least one sample")
    analytic = {name: np.zeros_like(p) for name, p in model.named_params()}
    for task, x, y in samples:
        for name, g in backward(model, task, x, y).named():
            analytic[name] += g / len(samples)

    work = model.copy()
    errors = []
    for name, p in work.named_params():
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up = _mean_loss(work, samples)
            p[idx] = orig - eps
            down = _mean_loss(work, samples)
            p[idx] = orig
            worst = max(worst, relative_error(analytic[name][idx], (up - down) / (2 * eps)))
        errors.append((name, worst))
    return GradCheckReport(max(e for _, e in errors), errors)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"PFTCKPT1"


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(model: ModelState, path, seed: int | None = None, config=None) -> None:
    """Magic, u32 header length, JSON header, then float64 little-endian arrays in declaration order."""
    header = {
        "input_dim": model.encoder.input_dim,
        "hidden_dim": model.encoder.hidden_dim,
        "tasks": [[t, h.n_labels] for t, h in model.heads.items()],
        "seed": seed,
        "config_hash": config_hash(config) if config is not None else None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for _, p in model.named_params():
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", f.read(4))
        return json.loads(f.read(n))


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + n])
    off += n
    inp, hid = header["input_dim"], header["hidden_dim"]
    shapes = [(hid, inp), (hid,)]
    for _, n_labels in header["tasks"]:
        shapes += [(n_labels, hid), (n_labels,)]
    need = off + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    arrays = []
    for s in shapes:
        count = int(np.prod(s))
        arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(DTYPE).reshape(s))
        off += 8 * count
    model = ModelState(EncoderParams(arrays[0], arrays[1]))
    for i, (task, _) in enumerate(header["tasks"]):
        model.add_head(HeadParams(arrays[2 + 2 * i], arrays[3 + 2 * i], task))
    return model
