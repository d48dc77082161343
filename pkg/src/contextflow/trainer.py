"""Optimization, the learning-rate schedule, evaluation and metrics."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from .bijections import ActNorm
from .datasets import Dataset
from .flowmodel import GENERALIST_PHASE, SPECIALIST_PHASE, FlowModel
from .gmmhead import classify, loss as gmm_loss
from .nn import GENERALIST, Param

log = logging.getLogger("contextflow")

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_nll", "val_accuracy", "skipped_steps", "seconds")


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; parameters were rolled back to the last good state."""


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr_init: float = 1e-3
    lr_warm_start: float = 1e-4
    warmup_epochs: int = 4
    decay_factor: float = 10.0
    decay_every: int = 12
    total_epochs: int = 48
    weight_decay: float = 1e-4
    alpha: float = 1e-3
    seed: int = 0
    phase: str = GENERALIST_PHASE
    max_steps: int | None = None
    clip_norm: float | None = None
    eval_batch_size: int = 1024

    def __post_init__(self):
        for name in ("batch_size", "lr_init", "lr_warm_start", "decay_factor", "decay_every",
                     "total_epochs", "alpha", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"train.{name} must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.total_epochs:
            raise ValueError("train.warmup_epochs must be in [0, total_epochs)")
        if self.weight_decay < 0:
            raise ValueError("train.weight_decay must be non-negative")
        if self.phase not in (GENERALIST_PHASE, SPECIALIST_PHASE):
            raise ValueError(f"train.phase must be {GENERALIST_PHASE!r} or {SPECIALIST_PHASE!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, frac: float = 0.0, cfg: TrainConfig | None = None) -> float:
    """Linear warm-up in global progress, then step decay every ``decay_every`` epochs."""
    cfg = cfg or TrainConfig()
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if not 0.0 <= frac < 1.0:
        raise ValueError("frac must be in [0, 1)")
    if epoch < cfg.warmup_epochs:
        progress = (epoch + frac) / cfg.warmup_epochs
        return cfg.lr_warm_start + progress * (cfg.lr_init - cfg.lr_warm_start)
    return cfg.lr_init / cfg.decay_factor ** (epoch // cfg.decay_every)


class AdamW:
    """Adam with decoupled weight decay applied to ``decay=True`` parameters."""

    def __init__(self, named: dict[str, Param], weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.names = {id(p): n for n, p in named.items()}
        self.params = list(named.values())
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            # never write to a frozen namespace
            assert not p.frozen, f"optimizer attempted to update frozen parameter {self.names[id(p)]}"
            k = id(p)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if p.decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainLog:
    rows: list[dict[str, Any]] = field(default_factory=list)
    steps: int = 0
    skipped_steps: int = 0

    @property
    def losses(self) -> list[float]:
        return [r["train_loss"] for r in self.rows]


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + size] for i in range(0, n, size)]


def _labels_for(model: FlowModel, ds: Dataset):
    return ds.labels if model.head.classes > 1 else None


def _snapshot(model: FlowModel):
    return {n: p.data.copy() for n, p in model.named_params()}, copy.deepcopy(model.buffers())


def _restore(model: FlowModel, snap) -> None:
    params, buffers = snap
    for n, p in model.named_params():
        p.data[...] = params[n]
    model.load_buffers(buffers)


def _grad_norm_clip(grads: dict, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / total)


def prepare(model: FlowModel, train: Dataset, rng=None) -> None:
    """Fit preprocessing and context statistics, then run the actnorm init pass."""
    rng = rng if rng is not None else dc.make_rng(0)
    if model.phase == GENERALIST_PHASE and model.preprocess:
        model.fit_preprocessing(train.data)
    if model.context_encoder is not None:
        model.context_encoder.fit(train.contexts)
    if any(isinstance(layer, ActNorm) and not layer.initialized for layer in model.layers):
        n = min(len(train), 512)
        idx = np.arange(n)
        ctx = {k: v[idx] for k, v in train.contexts.items()} if model.uses_context else None
        model.data_init(train.data[idx], ctx, rng)


def fit(
    model: FlowModel,
    train: Dataset,
    cfg: TrainConfig,
    val: Dataset | None = None,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainLog:
    """Minimize the semi-supervised GMM objective over ``train``."""
    from .checkpoint import save_checkpoint

    if cfg.phase != model.phase:
        raise ValueError(f"train phase {cfg.phase!r} does not match model phase {model.phase!r}")
    if model.phase == SPECIALIST_PHASE:
        frozen = model.param_store().namespace(GENERALIST)
        if any(not p.frozen for p in frozen.values()):
            raise ValueError("specialist training requires a frozen generalist namespace")
    shuffle_rng, noise_rng, init_rng = dc.split_rng(dc.make_rng(cfg.seed), 3)
    if cfg.max_steps != 0:
        try:
            prepare(model, train, init_rng)
        except FloatingPointError as err:
            raise NumericalAbort(f"initialization pass: {err}") from err
    store = model.param_store()
    opt = AdamW(store.trainable(), cfg.weight_decay)
    out = TrainLog()
    good = _snapshot(model)
    writer = None
    fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    labels_all = _labels_for(model, train)
    try:
        for epoch in range(cfg.total_epochs):
            t0 = time.perf_counter()
            batches = _batches(len(train), cfg.batch_size, shuffle_rng)
            losses = []
            for b, idx in enumerate(batches):
                if cfg.max_steps is not None and out.steps >= cfg.max_steps:
                    break
                lr = lr_at(epoch, b / len(batches), cfg)
                x = train.data[idx]
                ctx = {k: v[idx] for k, v in train.contexts.items()} if model.uses_context else None
                labels = None if labels_all is None else labels_all[idx]
                step_rng = dc.split_rng(noise_rng, 1)[0]
                try:
                    lp = model.log_prob(x, ctx, step_rng)
                    loss = gmm_loss(lp.total, labels, cfg.alpha)
                    if not np.isfinite(loss.data):
                        raise NumericalAbort(f"non-finite loss at epoch {epoch}, step {out.steps}")
                    grads = dc.backward(loss)
                except dc.SingularMatrixError as err:
                    out.skipped_steps += 1
                    log.info("skipped step %d: %s", out.steps, err)
                    continue
                except (FloatingPointError, dc.GradientError) as err:
                    raise NumericalAbort(f"epoch {epoch}, step {out.steps}: {err}") from err
                if any(not np.all(np.isfinite(g)) for g in grads.values()):
                    raise NumericalAbort(f"non-finite gradient at epoch {epoch}, step {out.steps}")
                if cfg.clip_norm:
                    _grad_norm_clip(grads, cfg.clip_norm)
                opt.step(grads, lr)
                out.steps += 1
                losses.append(float(loss.data))
            if not losses:
                break
            good = _snapshot(model)
            row = {
                "epoch": epoch,
                "lr": lr_at(epoch, 0.0, cfg),
                "train_loss": float(np.mean(losses)),
                "val_nll": "",
                "val_accuracy": "",
                "skipped_steps": out.skipped_steps,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            if val is not None and len(val):
                rep = evaluate(model, val, "classify" if model.head.classes > 1 else "detect",
                               seed=cfg.seed, batch_size=cfg.eval_batch_size, with_scores=False)
                row["val_nll"] = rep.nll
                row["val_accuracy"] = "" if rep.accuracy is None else rep.accuracy
            out.rows.append(row)
            log.info("epoch %d loss %.4f", epoch, row["train_loss"])
            if writer:
                writer.writerow(row)
                fh.flush()
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path)
    except NumericalAbort:
        _restore(model, good)
        raise
    finally:
        if fh:
            fh.close()
    return out


# --------------------------------------------------------------------------
# metrics


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels))


def per_class_recall(pred, labels) -> np.ndarray:
    pred, labels = np.asarray(pred), np.asarray(labels)
    classes = np.unique(labels)
    return np.array([np.mean(pred[labels == c] == c) for c in classes])


def balanced_accuracy(pred, labels) -> float:
    return float(per_class_recall(pred, labels).mean())


def min_sensitivity(pred, labels) -> float:
    return float(per_class_recall(pred, labels).min())


def precision_recall(pred, labels) -> tuple[float, float]:
    pred, labels = np.asarray(pred).astype(bool), np.asarray(labels).astype(bool)
    tp = float(np.sum(pred & labels))
    p = tp / pred.sum() if pred.sum() else 0.0
    r = tp / labels.sum() if labels.sum() else 0.0
    return p, r


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both inputs are 0."""
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def auroc(scores, labels) -> float | None:
    """Probability a random positive outscores a random negative (ties count half)."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float | None:
    """Mean of the precision at the rank of each positive, scores sorted descending."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    if not labels.any():
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    prec = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(prec[hits].mean())


def best_f1_threshold(scores, labels) -> float:
    """Threshold ``t`` maximizing F1 of ``scores >= t``."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    best_t, best_f = float(scores.max()) if len(scores) else 0.0, -1.0
    for t in np.unique(scores):
        f = f1_score(*precision_recall(scores >= t, labels))
        if f > best_f:
            best_t, best_f = float(t), f
    return best_t


@dataclass
class MetricsReport:
    nll: float
    accuracy: float | None = None
    balanced_accuracy: float | None = None
    ms: float | None = None
    auroc: float | None = None
    ap: float | None = None
    f1: float | None = None
    precision: float | None = None
    recall: float | None = None
    threshold: float | None = None

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    def table(self) -> str:
        rows = [(k, "undefined" if v is None else f"{v:.6f}") for k, v in self.as_dict().items()]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v:>14}" for k, v in rows)


def score_batches(model: FlowModel, ds: Dataset, seed: int = 0, batch_size: int = 1024):
    """Per-sample (N, M) class log-likelihoods, deterministic given ``seed``."""
    rng = dc.make_rng(seed)
    out = []
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        ctx = {k: v[idx] for k, v in ds.contexts.items()} if model.uses_context else None
        lp = model.log_prob(ds.data[idx], ctx, dc.split_rng(rng, 1)[0], train=False)
        out.append(lp.total.data)
    return np.concatenate(out) if out else np.zeros((0, model.head.classes))


def marginal_nll(loglik: np.ndarray) -> np.ndarray:
    """``-log p(x)`` under a uniform class prior."""
    m = loglik.shape[1]
    top = loglik.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(loglik - top).sum(axis=1))
    return -(lse - math.log(m))


def evaluate(
    model: FlowModel,
    data: Dataset,
    task: str = "classify",
    val: Dataset | None = None,
    seed: int = 0,
    batch_size: int = 1024,
    with_scores: bool = True,
) -> MetricsReport:
    if task not in ("classify", "detect"):
        raise ValueError(f"unknown task {task!r}")
    ll = score_batches(model, data, seed, batch_size)
    nll = marginal_nll(ll)
    rep = MetricsReport(nll=float(nll.mean()))
    if data.labels is None:
        return rep
    labels = np.asarray(data.labels)
    if task == "classify":
        if model.head.classes < 2:
            raise ValueError("classification needs at least two classes")
        keep = labels >= 0
        probs = classify(ll)[keep]
        y = labels[keep]
        pred = probs.argmax(axis=1)
        rep.accuracy = accuracy(pred, y)
        rep.balanced_accuracy = balanced_accuracy(pred, y)
        rep.ms = min_sensitivity(pred, y)
        if model.head.classes == 2 and with_scores:
            rep.auroc = auroc(probs[:, 1], y)
            rep.ap = average_precision(probs[:, 1], y)
            rep.precision, rep.recall = precision_recall(pred == 1, y == 1)
            rep.f1 = f1_score(rep.precision, rep.recall)
        return rep
    # anomaly detection: score = -log p, threshold from the validation split
    y = labels.astype(bool)
    if val is not None and val.labels is not None:
        t = best_f1_threshold(marginal_nll(score_batches(model, val, seed, batch_size)), val.labels)
    else:
        t = best_f1_threshold(nll, y)
    pred = nll >= t
    rep.threshold = t
    rep.accuracy = accuracy(pred, y)
    rep.balanced_accuracy = balanced_accuracy(pred, y)
    rep.ms = min_sensitivity(pred, y)
    rep.auroc = auroc(nll, y)
    rep.ap = average_precision(nll, y)
    rep.precision, rep.recall = precision_recall(pred, y)
    rep.f1 = f1_score(rep.precision, rep.recall)
    return rep
