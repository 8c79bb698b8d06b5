"""BCE training of ``TinyStilNet`` with Adam and a step learning-rate schedule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import BCE_EPS
from .model import TinyStilNet
from .nnops import sigmoid
from .synthdata import Clip, sample_frames

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    decay_factor: float = 0.1
    decay_every: int = 10
    epochs: int = 30
    batch: int = 16
    frames_train: int = 8
    frames_eval: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        for name in ("lr", "decay_factor", "decay_every", "epochs", "batch", "frames_train",
                     "frames_eval", "eps"):
            if not getattr(self, name) > 0:
                raise TrainError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise TrainError("weight_decay and grad_clip must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


def bce_loss(logits, labels) -> float:
    """Mean clamped binary cross-entropy over a batch of logits."""
    z = np.atleast_1d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
    if not np.all(np.isfinite(z)):
        raise TrainError("non-finite logit")
    if not np.all((y == 0) | (y == 1)):
        raise TrainError("labels must be 0 or 1")
    p = np.clip(sigmoid(z), BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise TrainError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {k}")
        if k not in state.m:
            state.m[k] = np.zeros_like(theta)
            state.v[k] = np.zeros_like(theta)
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        params[k] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)


def batch_grads(model: TinyStilNet, clips: Sequence[np.ndarray], labels: Sequence[int]):
    """Mean loss and mean gradient over a batch, accumulated clip by clip."""
    total = {k: np.zeros_like(v) for k, v in model.params.items()}
    losses = []
    for x, y in zip(clips, labels):
        loss, _, g = model.loss_and_grads(np.asarray(x, dtype=np.float64), y)
        losses.append(loss)
        for k in total:
            total[k] += g[k]
    n = len(losses)
    return float(np.mean(losses)), {k: v / n for k, v in total.items()}


def train_step(model: TinyStilNet, clips, labels, state: AdamState, lr: float,
               cfg: TrainConfig = TrainConfig()) -> float:
    loss, grads = batch_grads(model, clips, labels)
    if cfg.weight_decay:
        grads = {k: g + cfg.weight_decay * model.params[k] for k, g in grads.items()}
    if cfg.grad_clip:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    adam_step(model.params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return loss


EpochCallback = Callable[[int, TinyStilNet], bool]


def train(model: TinyStilNet, clips: Sequence[Clip], cfg: TrainConfig = TrainConfig(),
          log_file=None, on_epoch_end: EpochCallback | None = None, time_file=None) -> list[dict]:
    """Train in place.  ``on_epoch_end`` may return True to stop early.

    Log records (epoch, step, lr, loss) go to ``log_file`` as JSON lines.
    Wall times go to the separate ``time_file`` (step, wall) so the main log
    stays byte-reproducible.
    """
    if not clips:
        raise TrainError("empty training corpus")
    inputs = [sample_frames(c, cfg.frames_train).astype(np.float64) for c in clips]
    labels = [c.label for c in clips]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    step = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(inputs))
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            loss = train_step(model, [inputs[i] for i in idx], [labels[i] for i in idx], state, lr, cfg)
            rec = {"epoch": epoch, "step": step, "lr": lr, "loss": loss}
            history.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if time_file is not None:
                time_file.write(json.dumps({"step": step, "wall": time.perf_counter() - t0}) + "\n")
            step += 1
        log.info("epoch %d lr %.2e loss %.4f (%.1fs)", epoch, lr, history[-1]["loss"], time.perf_counter() - t0)
        if on_epoch_end is not None and on_epoch_end(epoch, model):
            break
    return history


def roc_auc(scores, labels) -> float:
    """Rank-statistic AUC with average ranks for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise TrainError("AUC undefined for a single-class corpus")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics_from_scores(probs, labels) -> dict:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    out = {"n": int(y.size), "accuracy": float(np.mean((p >= 0.5).astype(int) == y))}
    try:
        out["auc"] = roc_auc(p, y)
    except TrainError as exc:
        out["auc"] = None
        out["auc_error"] = str(exc)
    return out


def predict(model: TinyStilNet, clips: Sequence[Clip], frames: int) -> np.ndarray:
    return np.array([sigmoid(model.logit(sample_frames(c, frames).astype(np.float64))) for c in clips])


def evaluate(model: TinyStilNet, clips: Sequence[Clip], frames_eval: int = 16) -> dict:
    """Accuracy at p = 0.5 and AUC, one pass of ``frames_eval`` frames per clip."""
    if not clips:
        raise TrainError("empty evaluation corpus")
    return metrics_from_scores(predict(model, clips, frames_eval), [c.label for c in clips])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
