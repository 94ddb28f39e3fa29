"""AdamW with decoupled weight decay and the two learning-rate schedules:
exponential decay for the backbone-analog patch embedding, and the
inverse-square-root warmup schedule for the transformer parts, scaled by
the patch count (encoder group) or the label count (decoder group)."""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class ScheduleSpec:
    """kind 'exp_decay': lr0 * decay^(step/interval), continuous exponent.
    kind 'warmup': scale_dim^-0.5 * min(step^-0.5, step * warmup_steps^-1.5)."""

    kind: str = "warmup"
    lr0: float = 5e-4
    decay: float = 0.99
    interval: float = 1.0
    scale_dim: int = 1
    warmup_steps: int = 4000

    def validate(self) -> "ScheduleSpec":
        if self.kind not in ("exp_decay", "warmup"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "exp_decay":
            if self.lr0 <= 0:
                raise ValueError(f"lr0 must be > 0, got {self.lr0}")
            if not 0.0 < self.decay <= 1.0:
                raise ValueError(f"decay must be in (0, 1], got {self.decay}")
            if self.interval <= 0:
                raise ValueError(f"interval must be > 0, got {self.interval}")
        else:
            if self.warmup_steps < 1:
                raise ValueError(f"warmup_steps must be >= 1, "
                                 f"got {self.warmup_steps}")
            if self.scale_dim < 1:
                raise ValueError(f"scale_dim must be >= 1, got {self.scale_dim}")
        return self

    def lr(self, step: int) -> float:
        if self.kind == "exp_decay":
            return lr_exp_decay(step, self)
        return lr_warmup(step, self)


def lr_exp_decay(step: float, spec: ScheduleSpec) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return spec.lr0 * spec.decay ** (step / spec.interval)


def lr_warmup(step: int, spec: ScheduleSpec) -> float:
    if step < 1:
        raise ValueError(f"warmup schedule needs step >= 1, got {step}")
    return spec.scale_dim ** -0.5 * min(step ** -0.5,
                                        step * spec.warmup_steps ** -1.5)


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: list[Tensor], **hyper) -> "AdamWState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params: list[Tensor], grads: list[np.ndarray],
               state: AdamWState, lr: float) -> None:
    """One update: bias-corrected Adam moments plus decoupled weight decay,
    theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)."""
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"adamw_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.m)} state slots")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"adamw_step: grad {g.shape} vs param {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + state.eps)
                        + state.weight_decay * p.data)


class GroupedAdamW:
    """AdamW over named parameter groups, each with its own schedule.

    The three groups mirror the training recipe: the patch embedding decays
    exponentially like a pretrained backbone, the encoder warms up scaled by
    the patch count, and the decoder (with label embedding and head) warms
    up scaled by the label count.
    """

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]],
                 schedules: dict[str, ScheduleSpec],
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if set(groups) != set(schedules):
            raise ValueError(f"groups {sorted(groups)} and schedules "
                             f"{sorted(schedules)} must name the same sets")
        self.group_names = sorted(groups)
        self.params = {name: [t for _, t in groups[name]]
                       for name in self.group_names}
        self.param_names = {name: [n for n, _ in groups[name]]
                            for name in self.group_names}
        self.schedules = {name: schedules[name].validate()
                          for name in self.group_names}
        self.state = {name: AdamWState.for_params(
            self.params[name], beta1=beta1, beta2=beta2, eps=eps,
            weight_decay=weight_decay) for name in self.group_names}

    def learning_rates(self, step: int) -> dict[str, float]:
        return {name: self.schedules[name].lr(step)
                for name in self.group_names}

    def step(self, step: int) -> dict[str, float]:
        """Apply one update using each group's schedule at ``step``
        (1-based); missing grads are treated as zero. Returns the lrs."""
        lrs = self.learning_rates(step)
        for name in self.group_names:
            params = self.params[name]
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            adamw_step(params, grads, self.state[name], lrs[name])
        return lrs

    def zero_grad(self) -> None:
        for params in self.params.values():
            for p in params:
                p.grad = None
