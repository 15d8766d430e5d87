"""Losses, learning-rate schedule, Adam and mask-respecting training loops."""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericFault
from .lora import TrainMask
from .numkit import ACC_DTYPE, STORE_DTYPE, RngStream
from .policy import PolicyConfig, PolicyParams, TokenBatch, backward, forward, init_params

LOSS_KINDS = ("regression", "flow_matching")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    warmup_steps: int = 200
    peak_lr: float = 1e-3
    final_lr: float | None = None  # defaults to peak_lr / 10
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    loss_kind: str = "regression"
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.total_steps > 0 and not 0 <= self.warmup_steps < self.total_steps:
            raise ContractError("need 0 <= warmup_steps < total_steps")
        if self.final_lr is not None and self.final_lr > self.peak_lr:
            raise ContractError("final_lr must not exceed peak_lr")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.loss_kind!r}")

    @property
    def end_lr(self) -> float:
        return self.peak_lr / 10 if self.final_lr is None else self.final_lr

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


# reference values for a 3B-parameter model; desk runs rescale the magnitudes
FULL_SCALE = TrainConfig(total_steps=5000, warmup_steps=200, peak_lr=2.5e-5, final_lr=2.5e-6, batch_size=32)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``end_lr`` at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    peak, end = cfg.peak_lr, cfg.end_lr
    if step < cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span if span else 1.0
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# losses


def loss_regression(params: PolicyParams, batch: TokenBatch, targets: np.ndarray, trainable=None):
    """Mean over the batch of the squared action error, with gradients."""
    tr = forward(params, batch, tap=False)
    diff = tr.action - np.asarray(targets, ACC_DTYPE)
    B = len(batch)
    loss = float(np.sum(diff * diff, dtype=ACC_DTYPE) / B)
    grads = backward(tr, 2.0 * diff / B, trainable)
    return loss, grads


def flow_sample(targets: np.ndarray, gen: np.random.Generator):
    """Draw ``(t, eps, x_t, velocity target)`` for conditional flow matching."""
    a = np.asarray(targets, ACC_DTYPE)
    t = gen.uniform(0.0, 1.0, a.shape[0])
    eps = gen.standard_normal(a.shape)
    x_t = (1.0 - t)[:, None] * eps + t[:, None] * a
    return t, eps, x_t, a - eps


def loss_flow_matching(params: PolicyParams, batch: TokenBatch, targets: np.ndarray, gen: np.random.Generator,
                       trainable=None):
    t, eps, x_t, u = flow_sample(targets, gen)
    tr = forward(params, batch, tap=False, flow_x=x_t, flow_t=t)
    diff = tr.action - u
    B = len(batch)
    loss = float(np.sum(diff * diff, dtype=ACC_DTYPE) / B)
    grads = backward(tr, 2.0 * diff / B, trainable)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Plain Adam with float64 master copies of the trainable tensors."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.master: dict[str, np.ndarray] = {}

    def step(self, slots: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        """Update every array in ``slots`` (name -> live float32 array) in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name in sorted(slots):
            arr = slots[name]
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros(arr.shape, ACC_DTYPE)
                self.v[name] = np.zeros(arr.shape, ACC_DTYPE)
                self.master[name] = arr.astype(ACC_DTYPE)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.master[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            arr[...] = self.master[name]


def trainable_slots(params: PolicyParams, mask: TrainMask | None) -> dict[str, np.ndarray]:
    """Live arrays the optimizer may write, keyed like :func:`policy.backward` grads."""
    if mask is None:
        names = set(params.tensors)
        slots = {n: params.tensors[n] for n in names}
        for t, a in params.adapters.items():
            slots[f"{t}.lora.A"] = a.A
            slots[f"{t}.lora.B"] = a.B
        return slots
    missing = sorted(t for t in mask.lora_targets if t not in params.adapters)
    if missing:
        raise ContractError(f"mask requires adapters on {missing}; call lora.attach first")
    slots = {n: params.tensors[n] for n in mask.direct}
    for t in mask.lora_targets:
        slots[f"{t}.lora.A"] = params.adapters[t].A
        slots[f"{t}.lora.B"] = params.adapters[t].B
    return slots


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def append(self, step, lr, loss, grad_norm, eval_sr=None):
        if self.rows and step <= self.rows[-1]["step"]:
            raise ContractError("TrainLog steps must increase")
        self.rows.append(dict(step=step, lr=lr, loss=loss, grad_norm=grad_norm, eval_sr=eval_sr))

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,lr,loss,grad_norm,eval_sr\n")
        for r in self.rows:
            sr = "" if r["eval_sr"] is None else repr(r["eval_sr"])
            buf.write(f"{r['step']},{r['lr']!r},{r['loss']!r},{r['grad_norm']!r},{sr}\n")
        return buf.getvalue()


class TrainingAborted(NumericFault):
    """Raised on a non-finite loss; carries the last finite-loss parameters."""

    def __init__(self, message, last_good: PolicyParams, log: TrainLog):
        super().__init__(message, f"step {len(log.rows)}")
        self.last_good = last_good
        self.log = log


def train(
    params: PolicyParams,
    mask: TrainMask | None,
    data: tuple[TokenBatch, np.ndarray],
    cfg: TrainConfig,
    eval_fn: Callable[[PolicyParams], float] | None = None,
) -> tuple[PolicyParams, TrainLog]:
    """Adam on the tensors ``mask`` allows (all base tensors when ``mask`` is None).

    Works on a copy; the input params are never modified. Frozen tensors are
    not touched at all, so they stay byte-identical.
    """
    params = params.copy()
    batch_all, targets_all = data
    n = len(batch_all)
    if n == 0:
        raise ContractError("empty training set")
    slots = trainable_slots(params, mask)
    trainable = frozenset(slots)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    gen_batches = RngStream(cfg.seed, 0xBA7C).generator()
    gen_flow = RngStream(cfg.seed, 0xF70).generator()
    log = TrainLog()
    t0 = time.perf_counter()
    last_good = None
    for step in range(cfg.total_steps):
        idx = gen_batches.integers(0, n, cfg.batch_size)
        batch = batch_all.take(idx)
        targets = targets_all[idx]
        try:
            if cfg.loss_kind == "regression":
                loss, grads = loss_regression(params, batch, targets, trainable)
            else:
                loss, grads = loss_flow_matching(params, batch, targets, gen_flow, trainable)
        except NumericFault as e:
            raise TrainingAborted(str(e), last_good or params.copy(), log) from e
        if not math.isfinite(loss):
            raise TrainingAborted("non-finite loss", last_good or params.copy(), log)
        gnorm = math.sqrt(sum(float(np.sum(grads[k] ** 2)) for k in sorted(slots)))
        if cfg.grad_clip is not None and gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            grads = {k: grads[k] * scale for k in slots}
        lr = lr_at(step, cfg)
        opt.step(slots, grads, lr)
        sr = None
        if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            sr = float(eval_fn(params))
        log.append(step, lr, loss, gnorm, sr)
    log.wall_clock = time.perf_counter() - t0
    return params, log


def mean_loss(params: PolicyParams, data: tuple[TokenBatch, np.ndarray]) -> float:
    batch, targets = data
    tr = forward(params, batch, tap=False, keep_cache=False)
    diff = tr.action - np.asarray(targets, ACC_DTYPE)
    return float(np.sum(diff * diff) / len(batch))


def pretrain_multitask(
    policy_cfg: PolicyConfig,
    train_cfg: TrainConfig,
    task_data: Sequence[tuple[TokenBatch, np.ndarray]],
) -> tuple[PolicyParams, TrainLog]:
    """Train every parameter of a fresh policy on a mixture of task datasets."""
    if not task_data:
        raise ContractError("empty task mixture")
    batch = TokenBatch.concat([b for b, _ in task_data])
    targets = np.concatenate([a for _, a in task_data]).astype(STORE_DTYPE)
    params = init_params(policy_cfg)
    return train(params, None, (batch, targets), train_cfg)
