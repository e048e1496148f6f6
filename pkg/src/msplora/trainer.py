"""AdamW training of adapter factors on synthetic tasks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import linalg as la
from .linalg import Matrix, Tape
from .model import FrozenBackbone, forward, loss_cross_entropy
from .pyramid import GROUPS, partition_layers

TASK_KINDS = ("copy", "reverse", "teacher-distill")


class NumericalError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 3e-4
    epochs: int = 3
    batch_size: int = 16
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "linear"
    clip_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear decay to zero: ``lr_init * (1 - step/total)`` for 0-based ``step``."""
    if config.schedule == "constant":
        return config.lr_init
    return config.lr_init * (1.0 - step / total_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_w_step(
    params: list[tuple[str, Matrix]],
    grads: dict[str, Matrix],
    state: AdamState,
    step_index: int,
    config: TrainConfig,
    lr: float,
) -> None:
    """One in-place AdamW update. ``step_index`` is 0-based; bias correction uses ``step_index + 1``.

    Weight decay shrinks the parameter directly (``p -= lr * wd * p``) before the
    moment-based step and never touches the moment estimates.
    """
    b1, b2 = config.betas
    t = step_index + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params:
        g = grads[name].data
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass
class TaskData:
    tokens: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class SyntheticTask:
    """``copy``/``reverse``: the second half of each sequence repeats the first half
    (reversed for ``reverse``) and the model predicts it token by token.
    ``teacher-distill``: predict the argmax tokens of a teacher network, the frozen
    backbone with a hidden multi-scale perturbation on its query/value weights.

    Train, eval and teacher streams draw from disjoint spawn keys of ``seed``.
    """

    kind: str
    seed: int = 0
    n_train: int = 512
    n_eval: int = 128
    teacher_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    def _rng(self, stream: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, stream])))

    def generate(self, backbone: FrozenBackbone, split: str) -> TaskData:
        if split not in ("train", "eval"):
            raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
        cfg = backbone.config
        n = self.n_train if split == "train" else self.n_eval
        rng = self._rng(0 if split == "train" else 1)
        T = cfg.seq_len
        if self.kind == "teacher-distill":
            tokens = rng.integers(0, cfg.vocab, size=(n, T))
            teacher = make_teacher(backbone, self._rng(2), self.teacher_scale)
            targets = teacher_targets(teacher, tokens)
            return TaskData(tokens, targets, np.ones((n, T), dtype=bool))

        half = T // 2
        head = rng.integers(0, cfg.vocab, size=(n, half))
        tail = head if self.kind == "copy" else head[:, ::-1]
        tokens = np.concatenate([head, tail[:, : T - half]], axis=1)
        targets = np.zeros_like(tokens)
        targets[:, :-1] = tokens[:, 1:]
        mask = np.zeros((n, T), dtype=bool)
        mask[:, half - 1: T - 1] = True
        return TaskData(tokens, targets, mask)


def make_teacher(backbone: FrozenBackbone, rng: np.random.Generator, strength: float = 1.0,
                 ranks: tuple[int, int, int] = (4, 2, 2)) -> FrozenBackbone:
    """Copy of ``backbone`` whose W_q/W_v gain a shared + depth-group + per-layer low-rank shift."""
    cfg = backbone.config
    d = cfg.d_model
    teacher = backbone.copy()
    part = partition_layers(cfg.n_layers)

    def lowrank(r: int) -> np.ndarray:
        # each factor column has unit expected norm, so the shift has O(strength) spectral norm
        return (rng.standard_normal((d, r)) @ rng.standard_normal((r, d))) / d * strength

    for name in ("W_q", "W_v"):
        shared = lowrank(ranks[0])
        group = {g: lowrank(ranks[1]) for g in GROUPS}
        for l in range(cfg.n_layers):
            teacher.weights[f"h{l}.{name}"].data += shared + group[part.group_of(l)] + lowrank(ranks[2])
    return teacher


def teacher_targets(teacher: FrozenBackbone, tokens: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    for i in range(0, tokens.shape[0], chunk):
        logits = forward(teacher, None, tokens[i:i + chunk])
        out.append(logits.data.argmax(axis=1).reshape(-1, tokens.shape[1]))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# loops


LOG_FIELDS = ("step", "epoch", "loss", "lr", "grad_norm_global", "grad_norm_mid", "grad_norm_layer")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.rows]

    def epoch_mean_loss(self, epoch: int) -> float:
        vals = [r["loss"] for r in self.rows if r["epoch"] == epoch]
        return float(np.mean(vals))


def tier_grad_norms(grads: dict[str, Matrix], tier_of) -> dict[str, float]:
    sq = {"global": 0.0, "mid": 0.0, "layer": 0.0}
    for name, g in grads.items():
        sq[tier_of(name)] += float((g.data * g.data).sum())
    return {k: math.sqrt(v) for k, v in sq.items()}


def loss_and_grads(backbone, adapters, tokens, targets, mask):
    tape = Tape()
    for name, m in adapters.trainable_parameters():
        tape.param(name, m)
    logits = forward(backbone, adapters, tokens, tape)
    loss = loss_cross_entropy(logits, targets, mask)
    return loss.item(), la.backward(tape, loss)


def train(backbone: FrozenBackbone, adapters, task: SyntheticTask, config: TrainConfig,
          data: TaskData | None = None, snapshot=None) -> TrainLog:
    """Train ``adapters`` in place; the backbone is never written.

    ``snapshot(epoch, adapters)``, if given, is called before the first step
    (epoch 0) and after every epoch.
    """
    data = task.generate(backbone, "train") if data is None else data
    params = adapters.trainable_parameters()
    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    rng = la.make_rng(config.seed)
    state = AdamState()
    log = TrainLog()
    if snapshot is not None:
        snapshot(0, adapters)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            loss, grads = loss_and_grads(backbone, adapters, data.tokens[idx], data.targets[idx], data.mask[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}")
            norms = tier_grad_norms(grads, adapters.tier_of)
            if config.clip_norm is not None:
                total_norm = math.sqrt(sum(v * v for v in norms.values()))
                if total_norm > config.clip_norm:
                    for g in grads.values():
                        g.data *= config.clip_norm / total_norm
            lr = lr_at(config, step, total)
            adam_w_step(params, grads, state, step, config, lr)
            log.rows.append({
                "step": step, "epoch": epoch, "loss": loss, "lr": lr,
                "grad_norm_global": norms["global"], "grad_norm_mid": norms["mid"],
                "grad_norm_layer": norms["layer"],
            })
            step += 1
        if snapshot is not None:
            snapshot(epoch + 1, adapters)
    return log


def evaluate(backbone: FrozenBackbone, adapters, task: SyntheticTask, data: TaskData | None = None,
             chunk: int = 64) -> dict[str, float]:
    """Masked mean loss and token accuracy on the eval split. Pure."""
    data = task.generate(backbone, "eval") if data is None else data
    nll = 0.0
    correct = 0
    count = 0
    for i in range(0, len(data), chunk):
        sl = slice(i, i + chunk)
        logits = forward(backbone, adapters, data.tokens[sl])
        mask = data.mask[sl].reshape(-1)
        tgt = data.targets[sl].reshape(-1)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(len(tgt))
        nll += float(((lse - z[rows, tgt]) * mask).sum())
        correct += int(((z.argmax(axis=1) == tgt) & mask).sum())
        count += int(mask.sum())
    return {"loss": nll / count, "accuracy": correct / count}


def pretrain_backbone(backbone: FrozenBackbone, task: SyntheticTask, config: TrainConfig) -> TrainLog:
    """Fit every backbone weight on ``task`` (no adapters). Used once, before freezing."""
    data = task.generate(backbone, "train")
    params = [(f"backbone/{k}", m) for k, m in backbone.weights.items()]
    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    rng = la.make_rng(config.seed)
    state = AdamState()
    log = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            tape = Tape()
            logits = forward(backbone, None, data.tokens[idx], tape, train_backbone=True)
            loss = loss_cross_entropy(logits, data.targets[idx], data.mask[idx])
            if not math.isfinite(loss.item()):
                raise NumericalError(f"non-finite loss at pretraining step {step}")
            grads = la.backward(tape, loss)
            lr = lr_at(config, step, total)
            adam_w_step(params, grads, state, step, config, lr)
            log.rows.append({"step": step, "epoch": epoch, "loss": loss.item(), "lr": lr,
                             "grad_norm_global": 0.0, "grad_norm_mid": 0.0, "grad_norm_layer": 0.0})
            step += 1
    return log
