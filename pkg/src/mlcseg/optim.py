"""Training objective, Adam, and the epoch/step driver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import network
from .autodiff import Tape, Var, register_backward
from .config import ModelConfig
from .data import augment
from .network import BoundParams, is_trainable, mlcnet_forward
from .seeding import derive_seed

BCE_CLAMP = 1e-7


def _bce_parts(pred: np.ndarray, target: np.ndarray):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    t = np.asarray(target, dtype=np.float64)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("target must be binary (all values 0 or 1)")
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))
    return value, p, t


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy; predictions clamped away from {0, 1}."""
    value, _, _ = _bce_parts(pred, target)
    return value


def taped_bce_loss(tape: Tape, pred: Var, target: np.ndarray) -> Var:
    """Record the loss on a tape; the target is data, not a differentiable input."""
    value, p, t = _bce_parts(pred.data, target)
    grad = ((p - t) / (p * (1.0 - p) * p.size)).astype(pred.data.dtype)
    return tape.apply("bce_loss", (pred,), np.float64(value), {"grad": grad})


@register_backward("bce_loss")
def _bce_backward(ctx, g):
    return (ctx["grad"] * float(g),)


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict
    v: dict
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    m = {name: np.zeros_like(arr) for name, arr in params.items()}
    v = {name: np.zeros_like(arr) for name, arr in params.items()}
    return AdamState(m=m, v=v, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected update, in place; parameter order does not matter."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"no gradient for parameter '{name}'")
        if np.shape(g) != p.shape:
            raise ValueError(
                f"gradient shape {np.shape(g)} != parameter shape {p.shape} for '{name}'")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


@dataclass
class TrainConfig:
    """Run shape: epoch budget, batch size, optimizer hyperparameters, seed."""

    max_epochs: int = 200
    batch_size: int = 4
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    augment: bool = False
    selection: str = "best_val_loss"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.selection != "best_val_loss":
            raise ValueError(f"unknown model-selection rule '{self.selection}'")


@dataclass
class TrainResult:
    params: dict
    best_epoch: int
    best_val_loss: float
    log: list = field(default_factory=list)
    steps: int = 0


def _stack(samples, indices):
    images = np.stack([samples[i].image for i in indices]).astype(np.float32, copy=False)
    masks = np.stack([samples[i].mask for i in indices]).astype(np.float32, copy=False)
    return images, masks


def held_out_loss(model_config: ModelConfig, params, samples, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(samples), batch_size):
        idx = range(start, min(start + batch_size, len(samples)))
        images, masks = _stack(samples, idx)
        pred = network.predict_map(params, images, model_config)
        total += bce_loss(pred, masks) * len(idx)
    return total / len(samples)


def train(model_config: ModelConfig, params, train_samples, val_samples,
          run: TrainConfig, log_path=None, max_steps=None) -> TrainResult:
    """Shuffled mini-batch epochs; keeps the checkpoint with best held-out loss.

    Mutates `params` in place (including normalization running statistics)
    and returns a snapshot taken at the best epoch. The loss log is appended
    line by line as epochs finish.
    """
    if not train_samples:
        raise ValueError("empty training set")
    if not val_samples:
        raise ValueError("empty held-out set")
    shuffle_rng = np.random.default_rng(derive_seed(run.seed, "shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(run.seed, "dropout"))
    trainable = {n: a for n, a in params.items() if is_trainable(n)}
    state = init_adam(trainable, lr=run.lr, beta1=run.beta1, beta2=run.beta2,
                      epsilon=run.epsilon)
    best = {n: a.copy() for n, a in params.items()}
    best_val = float("inf")
    best_epoch = 0
    result = TrainResult(params=best, best_epoch=0, best_val_loss=best_val)
    step = 0
    done = False
    for epoch in range(1, run.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        seen = 0
        loss_sum = 0.0
        for start in range(0, len(order), run.batch_size):
            chunk = order[start : start + run.batch_size]
            batch = [train_samples[i] for i in chunk]
            if run.augment:
                batch = [augment(s, derive_seed(run.seed, f"augment:{epoch}:{s.id}"))
                         for s in batch]
            images = np.stack([s.image for s in batch]).astype(np.float32, copy=False)
            masks = np.stack([s.mask for s in batch]).astype(np.float32, copy=False)
            tape = Tape()
            bound = BoundParams(tape, params)
            pred = mlcnet_forward(tape, images, bound, model_config, training=True,
                                  dropout_rng=dropout_rng)
            loss_var = taped_bce_loss(tape, pred, masks)
            loss = float(loss_var.data)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at step {step}")
            grads = tape.backward(loss_var)
            adam_step(trainable, {n: grads[n] for n in trainable}, state)
            loss_sum += loss * len(chunk)
            seen += len(chunk)
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        train_loss = loss_sum / seen
        val_loss = held_out_loss(model_config, params, val_samples, run.batch_size)
        result.log.append((epoch, train_loss, val_loss))
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}\n")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best = {n: a.copy() for n, a in params.items()}
        if done:
            break
    result.params = best
    result.best_epoch = best_epoch
    result.best_val_loss = best_val
    result.steps = step
    return result
