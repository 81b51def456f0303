"""AdamW, warmup + cosine schedule, and the gradient-accumulated training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .autodiff import Parameter, backward, scale


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-7
    weight_decay: float = 0.01
    warmup_steps: int = 20
    total_steps: int = 200
    grad_accum: int = 2
    micro_batch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < total_steps "
                             f"({self.total_steps})")
        if self.grad_accum < 1 or self.micro_batch < 1:
            raise ValueError("grad_accum and micro_batch must be >= 1")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class OptimizerState:
    t: int = 0
    moments: dict = field(default_factory=dict)

    def slots(self, p: Parameter) -> tuple[np.ndarray, np.ndarray]:
        slot = self.moments.get(id(p))
        if slot is None:
            slot = (np.zeros_like(p.data), np.zeros_like(p.data), p)
            self.moments[id(p)] = slot
        return slot[0], slot[1]


@dataclass
class RunResult:
    wall_time_s: float
    final_train_loss: float
    step_losses: list[float]
    status: str = "ok"
    steps_completed: int = 0
    adapter_checkpoint: str | None = None
    failure_reason: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "RunResult":
        return cls(**json.loads(text))


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup reaching ``lr_max`` at ``warmup_steps``, cosine decay to 0."""
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    w, total = config.warmup_steps, config.total_steps
    if step < w:
        return config.lr_max * (step + 1) / w
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


def adamw_step(params, state: OptimizerState, lr: float, config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over the trainable ``params``.

    Gradients are left in place; zeroing them is the caller's job.
    """
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {p.name or 'parameter'}")
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for p in trainable:
        m, v = state.slots(p)
        kernels.adamw(p.data.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                      lr, config.beta1, config.beta2, config.eps, config.weight_decay, bc1, bc2)


class TrainingRun:
    """A training run advanced one optimizer step at a time.

    Each step is timed on its own and ``wall_time_s`` is the sum of step
    times, so several runs can share a worker by alternating steps.
    """

    def __init__(self, model, data, config: TrainConfig):
        self.model, self.data, self.config = model, data, config
        self.params = [p for p in model.parameters() if p.trainable]
        self.state = OptimizerState()
        self.losses: list[float] = []
        self.status, self.reason = "ok", ""
        self.elapsed = 0.0
        self.step_index = 0

    @property
    def done(self) -> bool:
        return self.status != "ok" or self.step_index >= self.config.total_steps

    def step(self) -> None:
        if self.done:
            return
        config, accum, step = self.config, self.config.grad_accum, self.step_index
        t0 = time.perf_counter()
        step_loss = 0.0
        for micro in range(accum):
            batch = self.data.train_batch(step * accum + micro, config.micro_batch, config.seed)
            loss = self.model.loss(batch)
            backward(scale(loss, 1.0 / accum) if accum > 1 else loss)
            step_loss += loss.item() / accum
        self.losses.append(step_loss)
        try:
            if not math.isfinite(step_loss):
                self.status, self.reason = "diverged", f"non-finite loss at step {step}"
            else:
                adamw_step(self.params, self.state, cosine_lr(step, config), config)
        except DivergenceError as exc:
            self.status, self.reason = "diverged", f"{exc} at step {step}"
        finally:
            for p in self.params:
                p.zero_grad()
            self.elapsed += time.perf_counter() - t0
        self.step_index += 1

    def result(self) -> RunResult:
        losses = self.losses
        done = len(losses) if self.status == "ok" else max(len(losses) - 1, 0)
        return RunResult(wall_time_s=self.elapsed,
                         final_train_loss=losses[-1] if losses else float("nan"),
                         step_losses=list(losses), status=self.status, steps_completed=done,
                         failure_reason=self.reason)


def train(model, data, config: TrainConfig) -> RunResult:
    """``total_steps`` optimizer steps of ``grad_accum`` micro-batches each.

    Only currently-trainable parameters move. The wall clock covers the
    training steps and nothing else. A non-finite loss or gradient stops the
    run with status ``diverged``; the losses seen so far are kept.
    """
    run = TrainingRun(model, data, config)
    while not run.done:
        run.step()
    return run.result()


def train_interleaved(jobs) -> list[RunResult]:
    """Train several ``(model, data, config)`` jobs by alternating single steps.

    Slow drift in machine speed then lands on every job alike, which keeps
    paired timing comparisons fair on a shared worker.
    """
    runs = [TrainingRun(*job) for job in jobs]
    while not all(r.done for r in runs):
        for r in runs:
            r.step()
    return [r.result() for r in runs]


def pretrain_base(model, data, config: TrainConfig) -> RunResult:
    """Full-parameter training of the base network, which is frozen again afterwards.

    Stands in for the pretrained checkpoint a real fine-tuning run starts from.
    """
    for p in model.base_parameters():
        p.trainable = True
    try:
        return train(model, data, config)
    finally:
        for p in model.base_parameters():
            p.trainable = False


def speedup(t_std: float, t_ale: float) -> dict:
    if t_std <= 0 or t_ale <= 0:
        raise ValueError("times must be positive")
    return {"percent": 100.0 * (t_std - t_ale) / t_std, "ratio": t_std / t_ale}


def measure_speedup(std, ale) -> dict:
    """Speedup percent and ratio of ``ale`` over ``std``.

    Accepts :class:`RunResult` objects or plain wall-clock seconds.
    """
    times = []
    for run in (std, ale):
        if isinstance(run, RunResult):
            if run.status != "ok":
                raise ValueError("cannot compute speedup from a diverged run")
            times.append(run.wall_time_s)
        else:
            times.append(float(run))
    return speedup(*times)
