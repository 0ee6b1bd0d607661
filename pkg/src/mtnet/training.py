"""Loss, learning-rate schedule, Adam and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor
from .transformer import RunMode

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def label_smoothed_ce(log_probs: Tensor, targets, smoothing: float = 0.0, pad_id: int = 0) -> Tensor:
    """Cross entropy against a smoothed one-hot target, averaged over
    non-pad positions.

    The gold token gets ``1 - smoothing``; every other token gets
    ``smoothing / (V - 1)``.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    m, V = log_probs.shape
    if targets.shape[0] != m:
        raise T.ShapeError(f"{targets.shape[0]} targets for {m} rows of log-probabilities")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    if V < 2 and smoothing > 0:
        raise ValueError("label smoothing needs a vocabulary of at least two tokens")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("every target position is padding; the loss is undefined")
    if np.any((targets < 0) | (targets >= V)):
        raise T.ShapeError(f"target ids must lie in [0, {V})")
    q = np.zeros((m, V))
    if smoothing > 0:
        q[:] = smoothing / (V - 1)
    q[np.arange(m), targets] = 1.0 - smoothing
    q[~keep] = 0.0
    return T.scale(T.sum_all(T.mul(log_probs, Tensor(q))), -1.0 / count)


def noam_lr(step: int, d: int, warmup: int) -> float:
    if step < 1:
        raise ValueError("step counts from 1")
    return d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def scalars(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}

    def moments(self) -> dict:
        return {k: (self.m[k], self.v[k]) for k in self.m}

    @classmethod
    def from_checkpoint(cls, ckpt) -> Optional["OptimizerState"]:
        scalars = ckpt.meta.get("optimizer")
        if scalars is None:
            return None
        state = cls(**scalars)
        for name, arr in ckpt.tensors.items():
            if name.startswith("adam.m."):
                state.m[name[7:]] = arr.copy()
            elif name.startswith("adam.v."):
                state.v[name[7:]] = arr.copy()
        return state


def adam_step(named_params: Sequence[tuple], state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update in place; gradients are read from ``.grad``
    (missing gradients count as zero)."""
    grads = {}
    for name, p in named_params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise TrainingError(f"non-finite gradient in parameter {name!r} ({bad} entries)")
        grads[name] = g
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr != 0.0:
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``;
    returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


def batch_loss(model, batch, mode: RunMode, smoothing: float, pad_id: int = 0) -> Tensor:
    memory = model.encode(batch, mode)
    log_probs = model.decode_log_probs(memory, batch.target_in, mode)
    return label_smoothed_ce(log_probs, batch.target_out, smoothing, pad_id)


def evaluate_loss(model, batches, pad_id: int = 0) -> float:
    """Token-averaged cross entropy (no smoothing, no dropout)."""
    mode = RunMode(eps=model.config.ln_eps)
    total, count = 0.0, 0
    for batch in batches:
        n = int((np.asarray(batch.target_out) != pad_id).sum())
        total += batch_loss(model, batch, mode, 0.0, pad_id).item() * n
        count += n
    if count == 0:
        raise ValueError("no target tokens to evaluate")
    return total / count


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)        # per step
    rates: list = field(default_factory=list)         # per step
    epochs: list = field(default_factory=list)        # dicts per epoch
    best_valid: float = math.inf
    best_epoch: int = -1
    best_params: Optional[dict] = None
    optimizer: Optional[OptimizerState] = None
    rng: Optional[np.random.Generator] = None

    @property
    def steps(self) -> int:
        return len(self.losses)


def _snapshot(model) -> dict:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def load_params(model, params: dict) -> None:
    for name, p in model.named_parameters():
        p.data = params[name].copy()


def train_loop(model, batches: Sequence, epochs: Optional[int] = None, config=None,
               valid_batches: Optional[Sequence] = None, lr: Optional[float] = None,
               max_steps: Optional[int] = None, rng: Optional[np.random.Generator] = None,
               optimizer: Optional[OptimizerState] = None, shuffle: bool = True,
               restore_best: bool = False, on_step: Optional[Callable] = None,
               pad_id: int = 0) -> TrainResult:
    """Teacher-forced training with Adam and the warmup schedule.

    ``lr`` overrides the schedule with a constant rate. One seeded generator
    drives both batch shuffling and dropout, so a run is reproducible from
    ``config.seed`` (or from a restored ``rng`` and ``optimizer``). When
    validation batches are given, the parameters with the lowest validation
    loss are kept in ``result.best_params`` and optionally restored.
    """
    if not batches:
        raise ValueError("training needs at least one batch")
    config = config if config is not None else model.config
    epochs = config.epochs if epochs is None else epochs
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    state = optimizer if optimizer is not None else OptimizerState()
    named = model.named_parameters()
    params = [p for _, p in named]
    mode = RunMode(train=True, dropout=config.dropout, rng=rng, eps=config.ln_eps)
    result = TrainResult(optimizer=state, rng=rng)
    for epoch in range(epochs):
        order = rng.permutation(len(batches)) if shuffle else np.arange(len(batches))
        epoch_losses = []
        for bi in order:
            if max_steps is not None and result.steps >= max_steps:
                break
            for p in params:
                p.zero_grad()
            with Tape() as tape:
                loss = batch_loss(model, batches[bi], mode, config.label_smoothing, pad_id)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {state.step + 1}")
            tape.backward(loss)
            if config.grad_clip > 0:
                clip_gradients(params, config.grad_clip)
            rate = lr if lr is not None else config.lr_scale * noam_lr(state.step + 1, config.d,
                                                                        config.warmup_steps)
            adam_step(named, state, rate)
            result.losses.append(value)
            result.rates.append(rate)
            epoch_losses.append(value)
            if on_step is not None:
                on_step(state.step, value, rate)
        record = {"epoch": epoch + 1, "steps": state.step,
                  "train_loss": float(np.mean(epoch_losses)) if epoch_losses else math.nan}
        if valid_batches:
            vl = evaluate_loss(model, valid_batches, pad_id)
            record["valid_loss"] = vl
            if vl < result.best_valid:
                result.best_valid = vl
                result.best_epoch = epoch + 1
                result.best_params = _snapshot(model)
        result.epochs.append(record)
        log.info("epoch %d: %s", epoch + 1, record)
        if max_steps is not None and result.steps >= max_steps:
            break
    if restore_best and result.best_params is not None:
        load_params(model, result.best_params)
    return result
