"""AdamW prompt tuning with warmup + cosine schedule.

Only tensors owned by the prompt bank are ever updated; the frozen backbone
has no optimizer state at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import compute_metrics
from .model import DGLModel, RetrievalBatch
from .tensor import GradTape


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-3
    weight_decay: float = 0.2
    epochs: int = 10
    batch_size: int = 8
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def keys(self) -> set[str]:
        return set(self.m)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr``, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = config.warmup_fraction * total_steps
    if step < warm:
        return config.lr * step / warm
    if total_steps <= warm:
        return config.lr
    progress = (step - warm) / (total_steps - warm)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _nonfinite_report(tape: GradTape, params: dict) -> str:
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return f"trainable tensor {name!r} holds non-finite values"
    node = tape.first_nonfinite()
    if node is not None:
        return f"first non-finite value produced by op #{node.index} ({node.op}) with output shape {node.output.shape}"
    return "loss is non-finite"


def train_step(model: DGLModel, batch: RetrievalBatch, state: OptimizerState, config: TrainConfig, lr: float) -> float:
    """One forward/backward pass and AdamW update; returns the loss."""
    params = model.trainable()
    if state.keys() != set(params):
        raise KeyError("optimizer state does not match the trainable set")
    for p in params.values():
        p.grad = None
    with GradTape() as tape:
        loss = model.loss(batch)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(_nonfinite_report(tape, params))
    tape.backward(loss)

    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.grad_clip:
            grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}

    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**state.step, 1 - b2**state.step
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        update = (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + config.eps)
        p.data = p.data - lr * (update + config.weight_decay * p.data)
        p.grad = None
    return value


def evaluate(model: DGLModel, data: RetrievalBatch, direction: str = "t2v"):
    tf, vf = model.embed(data)
    return compute_metrics(tf @ vf.T, direction)


@dataclass
class FitResult:
    log: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_r1: float = -1.0
    initial_r1: float | None = None
    state: OptimizerState | None = None


def fit(model: DGLModel, train: RetrievalBatch, config: TrainConfig, val: RetrievalBatch | None = None, on_epoch=None) -> FitResult:
    """Train for ``config.epochs`` epochs with seeded shuffling.

    One log row per epoch: ``epoch, step, lr, loss`` (mean over the epoch)
    and ``val_r1`` when validation data is given. The bank state with the
    best validation R@1 is kept in the result.
    """
    n = len(train)
    if n == 0:
        raise ValueError("empty training set")
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    rng = np.random.default_rng([config.seed, 2])
    state = OptimizerState.for_params(model.trainable())
    result = FitResult(state=state)
    if val is not None:
        result.initial_r1 = evaluate(model, val).r_at[1]
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        lr = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            lr = lr_at(step, total, config)
            losses.append(train_step(model, train.subset(idx), state, config, lr))
            step += 1
        row = {"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(losses))}
        if val is not None:
            r1 = evaluate(model, val).r_at[1]
            row["val_r1"] = r1
            if r1 > result.best_r1:
                result.best_r1 = r1
                result.best_state = model.bank.state_dict()
        result.log.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if val is None:
        result.best_state = model.bank.state_dict()
    return result


def format_log(log: list[dict]) -> str:
    has_val = bool(log) and "val_r1" in log[0]
    lines = ["epoch,step,lr,loss" + (",val_r1" if has_val else "")]
    for r in log:
        line = f"{r['epoch']},{r['step']},{r['lr']!r},{r['loss']!r}"
        if has_val:
            line += f",{r['val_r1']!r}"
        lines.append(line)
    return "\n".join(lines) + "\n"
