"""Adam with inverse-square-root decay, clipping, early stopping and the train loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model.transformer import (
    TransformerModel,
    batch_loss,
    gradients,
    make_batch,
)

log = logging.getLogger(__name__)

SCHEDULES = ("decay_after", "warmup")
STOP_METRICS = ("validation_loss", "validation_wf")


@dataclass
class TrainConfig:
    batch_size: int = 500
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    decay_steps: int = 16000
    schedule: str = "decay_after"
    clip_norm: float = 5.0
    patience: int = 5
    smoothing: float = 0.1
    max_epochs: int = 50
    max_steps: int = 0
    eval_every: int = 100
    stop_metric: str = "validation_loss"
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.stop_metric not in STOP_METRICS:
            raise ValueError(f"stop_metric must be one of {STOP_METRICS}")


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Learning rate for a 1-based step.

    ``decay_after``: flat at ``lr`` up to ``decay_steps``, then
    ``lr * sqrt(decay_steps / step)``. ``warmup``: linear warmup over
    ``decay_steps`` followed by the same inverse-square-root decay.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    d = config.decay_steps
    if config.schedule == "warmup":
        return config.lr * min(step / d, math.sqrt(d / step))
    if step <= d:
        return config.lr
    return config.lr * math.sqrt(d / step)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )

    def as_dict(self):
        return {"m": self.m, "v": self.v, "t": self.t}


def adam_step(params, grads, state: AdamState, lr_t, config: TrainConfig):
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        params[k] -= (lr_t * (m / c1) / (np.sqrt(v / c2) + config.epsilon)).astype(params[k].dtype)
    return params, state


def global_norm(grads) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads, clip_norm=5.0):
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


class EarlyStopping:
    """Tracks the best stop-metric value and counts evaluations without improvement."""

    def __init__(self, patience, mode="min"):
        self.patience = patience
        self.mode = mode
        self.best = None
        self.best_index = None
        self.bad = 0
        self.history = []

    def update(self, value) -> bool:
        """Record one evaluation; returns True if it is a new best."""
        self.history.append(value)
        better = self.best is None or (value < self.best if self.mode == "min" else value > self.best)
        if better:
            self.best = value
            self.best_index = len(self.history) - 1
            self.bad = 0
        else:
            self.bad += 1
        return better

    @property
    def should_stop(self):
        return self.bad >= self.patience


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    metric_history: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    best_eval: int | None = None
    best_step: int | None = None
    stopped_early: bool = False
    steps: int = 0
    final_train_loss: float | None = None


def encode_pairs(pairs, tokenizer, max_positions=None):
    enc = []
    for p in pairs:
        s, t = tokenizer.encode(p.source_text), tokenizer.encode(p.target_text)
        if max_positions is not None and max(len(s), len(t)) + 1 > max_positions:
            raise ValueError(f"pair from prompt {p.prompt_id!r} exceeds max_positions")
        enc.append((s, t))
    return enc


def mean_loss(model, encoded, smoothing, batch_size=256):
    """Token-weighted mean label-smoothed loss over encoded pairs (eval mode)."""
    total, count = 0.0, 0
    for i in range(0, len(encoded), batch_size):
        chunk = encoded[i : i + batch_size]
        batch = make_batch(chunk)
        n = int((batch[2] != 0).sum())
        total += batch_loss(model, batch, smoothing) * n
        count += n
    return total / count


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_loop(
    model: TransformerModel,
    train_pairs,
    tokenizer,
    config: TrainConfig,
    validation_pairs=None,
    evaluate_wf=None,
    state: AdamState | None = None,
    start_step: int = 0,
    log_stream=None,
):
    """Mini-batch training with periodic evaluation and early stopping.

    ``validation_pairs`` (SampledPair list) feeds the ``validation_loss``
    metric; ``evaluate_wf(model) -> float`` feeds ``validation_wf``. Batch
    order and dropout depend only on ``(config.seed, step)``, so resuming from
    ``(state, start_step)`` replays an uninterrupted run exactly.

    Returns ``(best_model, report, state)``; ``model`` itself is left at the
    last trained step.
    """
    if not train_pairs:
        raise ValueError("no training pairs")
    encoded = encode_pairs(train_pairs, tokenizer, model.config.max_positions)
    val_encoded = (
        encode_pairs(validation_pairs, tokenizer, model.config.max_positions)
        if validation_pairs
        else None
    )
    if config.stop_metric == "validation_wf" and evaluate_wf is None:
        raise ValueError("validation_wf stop metric needs an evaluate_wf callback")
    state = state or AdamState.zeros_like(model.params)
    n = len(encoded)
    per_epoch = math.ceil(n / config.batch_size)
    max_steps = per_epoch * config.max_epochs
    if config.max_steps:
        max_steps = min(max_steps, config.max_steps)
    stopper = EarlyStopping(config.patience, "min" if config.stop_metric == "validation_loss" else "max")
    report = TrainReport()
    best = model.copy()
    epoch_loss, epoch_n = 0.0, 0

    def evaluate(step):
        if config.stop_metric == "validation_wf":
            return float(evaluate_wf(model))
        if val_encoded:
            return mean_loss(model, val_encoded, config.smoothing)
        return mean_loss(model, encoded, config.smoothing)

    step = start_step
    while step < max_steps:
        epoch, pos = divmod(step, per_epoch)
        order = _epoch_order(config.seed, epoch, n)
        idx = order[pos * config.batch_size : (pos + 1) * config.batch_size]
        batch = make_batch([encoded[i] for i in idx])
        rng = np.random.default_rng([config.seed, 1_000_003, step])
        loss, grads = gradients(model, batch, config.smoothing, rng)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at step {step + 1}")
        grads = clip_gradients(grads, config.clip_norm)
        step += 1
        lr_t = lr_schedule(step, config)
        adam_step(model.params, grads, state, lr_t, config)
        epoch_loss += loss
        epoch_n += 1
        metric = None
        if step % config.eval_every == 0 or step == max_steps:
            metric = evaluate(step)
            report.metric_history.append(metric)
            report.eval_steps.append(step)
            if stopper.update(metric):
                best = model.copy()
                report.best_eval = stopper.best_index
                report.best_step = step
        if log_stream is not None:
            fields = [str(step), f"{lr_t:.6g}", f"{loss:.6f}"]
            if metric is not None:
                fields.append(f"{metric:.6f}")
            print("\t".join(fields), file=log_stream)
        if step % per_epoch == 0 or step == max_steps:
            report.epoch_losses.append(epoch_loss / max(epoch_n, 1))
            epoch_loss, epoch_n = 0.0, 0
        if metric is not None and stopper.should_stop:
            report.stopped_early = True
            break
    report.steps = step
    if report.best_step is None:
        best = model.copy()
    report.final_train_loss = mean_loss(best, encoded, config.smoothing)
    return best, report, state

