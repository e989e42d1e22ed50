"""Adam, plateau schedule and the two training loops."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, total_loss
from .models import LanguageModel, VisualModel, decode_visemes, pool_frames
from .synth import Dataset, SpeechType, Utterance
from .viseme_map import PAD


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 64
    epochs: int = 50
    patience: int = 5
    lr_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.epochs, self.patience, self.lr_factor, self.eps) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.patience >= self.epochs:
            raise ValueError("patience must be smaller than the epoch count")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")

    @classmethod
    def language_defaults(cls, **kw) -> "TrainConfig":
        return cls(**{"lr": 5e-4, "batch_size": 10, **kw})

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


class Adam:
    def __init__(self, params: Sequence[ad.Node], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        ad.zero_grad(self.params)


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: Adam, patience: int = 5, factor: float = 0.5):
        self.opt, self.patience, self.factor = optimizer, patience, factor
        self.best = math.inf
        self.bad_epochs = 0
        self.reductions = 0

    def step(self, metric: float) -> bool:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.opt.lr *= self.factor
            self.bad_epochs = 0
            self.reductions += 1
            return True
        return False


# tensors for the visual model ------------------------------------------------

@dataclass
class SeqBatch:
    x: np.ndarray       # (N, L, D) pooled features, zero beyond each sequence
    y: np.ndarray       # (N, L) labels padded with PAD
    mask: np.ndarray    # (N, L) true at real positions

    def __len__(self):
        return len(self.y)

    def take(self, idx) -> "SeqBatch":
        return SeqBatch(self.x[idx], self.y[idx], self.mask[idx])


def stack_utterances(utts: Sequence[Utterance], max_len: int | None = None) -> SeqBatch:
    if not utts:
        raise ValueError("no utterances")
    L = max_len or max(len(u.labels) for u in utts)
    D = utts[0].frames.shape[1]
    x = np.zeros((len(utts), L, D))
    y = np.full((len(utts), L), PAD, dtype=np.int64)
    mask = np.zeros((len(utts), L), dtype=bool)
    for i, u in enumerate(utts):
        n = len(u.labels)
        x[i, :n] = pool_frames(u.frames, n)
        y[i, :n] = u.labels
        mask[i, :n] = True
    return SeqBatch(x, y, mask)


def by_type(utts: Sequence[Utterance], stype: SpeechType) -> list[Utterance]:
    return [u for u in utts if u.speech_type is stype]


def max_length(ds: Dataset) -> int:
    return max(len(u.labels) for _, utts in ds for u in utts)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    terms: dict[str, float] = field(default_factory=dict)
    skipped: int = 0


@dataclass
class TrainResult:
    model: VisualModel | LanguageModel
    log: list[EpochLog]
    best_epoch: int
    best_val: float
    seconds: float


def _batch_loss(model, bn: SeqBatch | None, bs: SeqBatch | None, cfg: LossConfig):
    qn = (model(bn.x, bn.mask), bn.y) if bn is not None else None
    qs = (model(bs.x, bs.mask), bs.y) if bs is not None else None
    return total_loss(qn, qs, cfg)


def train_visual(model: VisualModel, ds: Dataset, loss_cfg: LossConfig, cfg: TrainConfig) -> TrainResult:
    """Minibatch Adam on the configured loss; keeps the best-validation weights.

    Each step pairs a normal batch with a silent batch whose size is scaled
    so that one epoch passes over both training sets once.
    """
    start = time.perf_counter()
    L = max_length(ds)
    train_n = by_type(ds.train, SpeechType.NORMAL) if loss_cfg.needs_normal else []
    train_s = by_type(ds.train, SpeechType.SILENT) if loss_cfg.needs_silent else []
    if (loss_cfg.needs_normal and not train_n) or (loss_cfg.needs_silent and not train_s):
        raise ValueError("training split lacks a speech type required by the loss")
    val_n = by_type(ds.val, SpeechType.NORMAL) if loss_cfg.needs_normal else []
    val_s = by_type(ds.val, SpeechType.SILENT) if loss_cfg.needs_silent else []
    if (loss_cfg.needs_normal and not val_n) or (loss_cfg.needs_silent and not val_s):
        raise ValueError("validation split lacks a speech type required by the loss")
    tn = stack_utterances(train_n, L) if train_n else None
    ts = stack_utterances(train_s, L) if train_s else None
    vn = stack_utterances(val_n, L) if val_n else None
    vs = stack_utterances(val_s, L) if val_s else None

    rng = np.random.default_rng([cfg.seed, 11])
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauScheduler(opt, cfg.patience, cfg.lr_factor)
    lead = tn if tn is not None else ts
    n_steps = max(1, math.ceil(len(lead) / cfg.batch_size))

    log: list[EpochLog] = []
    best_val, best_state, best_epoch = math.inf, model.state_dict(), 0
    for epoch in range(1, cfg.epochs + 1):
        perm_n = rng.permutation(len(tn)) if tn is not None else None
        perm_s = rng.permutation(len(ts)) if ts is not None else None
        sums: dict[str, float] = {}
        total_sum, skipped = 0.0, 0
        for step in range(n_steps):
            bn = tn.take(np.array_split(perm_n, n_steps)[step]) if tn is not None else None
            bs = ts.take(np.array_split(perm_s, n_steps)[step]) if ts is not None else None
            if bn is not None and len(bn) == 0:
                bn = None
            if bs is not None and len(bs) == 0:
                bs = None
            loss, breakdown = _batch_loss(model, bn, bs, loss_cfg)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total_sum += loss.item()
            for k, tv in breakdown.items():
                sums[k] = sums.get(k, 0.0) + tv.value
                skipped += tv.skipped
        with ad.no_grad():
            val_loss = _batch_loss(model, vn, vs, loss_cfg)[0].item()
        log.append(EpochLog(epoch, opt.lr, total_sum / n_steps, val_loss,
                            {k: v / n_steps for k, v in sums.items()}, skipped))
        if not math.isfinite(val_loss) or not math.isfinite(total_sum):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        if val_loss < best_val:
            best_val, best_state, best_epoch = val_loss, model.state_dict(), epoch
        sched.step(val_loss)
    model.load_state_dict(best_state)
    return TrainResult(model, log, best_epoch, best_val, time.perf_counter() - start)


def predict_visemes(model: VisualModel, utts: Sequence[Utterance], max_len: int | None = None,
                    chunk: int = 512) -> list[list[int]]:
    """Position-aligned argmax decoding of each utterance (pads stripped)."""
    if not utts:
        return []
    batch = stack_utterances(utts, max_len)
    out = []
    for i in range(0, len(batch), chunk):
        part = batch.take(slice(i, i + chunk))
        q = model.predict(part.x, part.mask)
        for row, m in zip(q, part.mask):
            out.append(decode_visemes(row[m]))
    return out


def train_language(model: LanguageModel, inputs: Sequence[Sequence[int]], words: Sequence[Sequence[str]],
                   val_inputs: Sequence[Sequence[int]], val_words: Sequence[Sequence[str]],
                   cfg: TrainConfig) -> TrainResult:
    """Teacher-forced training on (viseme sequence, word sequence) pairs."""
    if not inputs or not val_inputs:
        raise ValueError("empty language-model split")
    inputs = [list(v) if len(v) else [PAD] for v in inputs]
    val_inputs = [list(v) if len(v) else [PAD] for v in val_inputs]
    start = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, 13])
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauScheduler(opt, cfg.patience, cfg.lr_factor)
    n = len(inputs)
    log = []
    best_val, best_state, best_epoch = math.inf, model.state_dict(), 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total, steps = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss = model.teacher_forced_loss([inputs[j] for j in idx], [words[j] for j in idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item()
            steps += 1
        with ad.no_grad():
            val = model.teacher_forced_loss(val_inputs, val_words).item()
        log.append(EpochLog(epoch, opt.lr, total / steps, val))
        if val < best_val:
            best_val, best_state, best_epoch = val, model.state_dict(), epoch
        sched.step(val)
    model.load_state_dict(best_state)
    return TrainResult(model, log, best_epoch, best_val, time.perf_counter() - start)


def clone(model):
    return copy.deepcopy(model)
