"""Numeric core shared by every encoder and trainer.

Public API
----------
softmax(x, dim=-1) -> Tensor
layer_norm(x, gain, bias, eps=1e-5) -> Tensor
multi_head_attention(queries, keys, values, n_heads, mask=None) -> Tensor
    Scaled dot-product attention over already-projected inputs; no positional
    terms, so jointly permuting keys and values leaves the output unchanged.
dropout(x, p, generator, training) -> Tensor

OptimState, adamw_step(params, grads, state, lr, ...)
AdamW
    torch.optim.Optimizer that applies adamw_step per parameter group
    (decoupled weight decay, bias-corrected moments).

Schedule, lr_at_step(schedule, step) -> float
    Linear warmup 0 -> peak, then linear decay peak -> 0 at total_steps.

grad_check(computation, params, tol=1e-4, h=1e-5) -> GradCheckReport
    Central finite differences against autograd, for double-precision runs.

Seeds
    Every random stream of a run derives from one seed, split in a fixed
    order: parameter init, data, dropout. Data and dropout streams are further
    keyed by (purpose, index) so any step or sample can be regenerated alone.

NumericError
    Raised on non-finite values where finiteness is required.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

from dest_qa.config import ConfigError
from dest_qa.utils.log import log


def masked_value(dtype: torch.dtype) -> float:
    """Finite stand-in for -inf in masked scores."""
    return torch.finfo(dtype).min


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    exp = shifted.exp()
    return exp / exp.sum(dim=dim, keepdim=True)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"layer_norm: gain/bias width {gain.shape[-1]}/{bias.shape[-1]} "
            f"does not match input width {x.shape[-1]}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    mean = x.mean(dim=-1, keepdim=True)
    var = (x - mean).pow(2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * gain + bias


def multi_head_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    n_heads: int,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Attend queries [..., Lq, D] over keys/values [..., Lk, D].

    Args:
        mask: boolean, True where attention is allowed. Either a key mask
            [..., Lk] or a full mask [..., Lq, Lk].

    Returns:
        Tensor [..., Lq, D], one row per query.
    """
    dim = queries.shape[-1]
    if n_heads < 1 or dim % n_heads:
        raise ConfigError(f"model dimension {dim} is not divisible by {n_heads} heads")
    if keys.shape[-2] == 0:
        raise ConfigError("attention over an empty key set")
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError(f"key count {keys.shape[-2]} != value count {values.shape[-2]}")

    head_dim = dim // n_heads

    def split(t: torch.Tensor) -> torch.Tensor:
        # [..., L, D] -> [..., heads, L, head_dim]
        return t.reshape(*t.shape[:-1], n_heads, head_dim).transpose(-3, -2)

    q, k, v = split(queries), split(keys), split(values)
    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)

    if mask is not None:
        if mask.dim() == queries.dim() - 1:
            allowed = mask[..., None, None, :]
        else:
            allowed = mask[..., None, :, :]
        scores = scores.masked_fill(~allowed, masked_value(scores.dtype))

    out = softmax(scores, dim=-1) @ v
    return out.transpose(-3, -2).reshape(*queries.shape[:-1], dim)


def dropout(
    x: torch.Tensor, p: float, generator: torch.Generator | None, training: bool
) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def check_finite(value: torch.Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {what}")


# --- optimization ------------------------------------------------------------


@dataclass
class OptimState:
    """First/second moment buffers matching the parameters, plus step count."""

    exp_avg: list[torch.Tensor]
    exp_avg_sq: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Iterable[torch.Tensor]) -> OptimState:
        params = list(params)
        return cls(
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
        )


def adamw_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor],
    state: OptimState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Update params and state in place.

    Raises:
        NumericError: if any gradient is non-finite; nothing is modified.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise ValueError("params, grads and moment buffers must have equal length")
    for i, (p, g, m) in enumerate(zip(params, grads, state.exp_avg)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {tuple(p.shape)} vs {tuple(g.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(
                f"non-finite gradient in parameter {i} (shape {tuple(g.shape)}), step aborted"
            )

    state.step += 1
    bias1 = 1.0 - beta1**state.step
    bias2 = 1.0 - beta2**state.step

    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
            # decoupled decay acts on the parameter, not through the moments
            p.mul_(1.0 - lr * weight_decay)
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / bias2).sqrt().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bias1)


class AdamW(torch.optim.Optimizer):
    """AdamW over named parameter groups, one OptimState per group."""

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, step=0)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        # validate every group first so a bad gradient aborts the whole step
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    name = group.get("name", "?")
                    raise NumericError(
                        f"non-finite gradient in group '{name}' (shape {tuple(p.shape)}), step aborted"
                    )

        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            if not params:
                continue
            for p in params:
                if p not in self.state or not self.state[p]:
                    self.state[p]["exp_avg"] = torch.zeros_like(p)
                    self.state[p]["exp_avg_sq"] = torch.zeros_like(p)
            state = OptimState(
                exp_avg=[self.state[p]["exp_avg"] for p in params],
                exp_avg_sq=[self.state[p]["exp_avg_sq"] for p in params],
                step=group["step"],
            )
            beta1, beta2 = group["betas"]
            adamw_step(
                params,
                [p.grad for p in params],
                state,
                lr=group["lr"],
                beta1=beta1,
                beta2=beta2,
                eps=group["eps"],
                weight_decay=group["weight_decay"],
            )
            group["step"] = state.step
        return loss

    def export_state(self, names: Mapping[torch.Tensor, str]) -> dict[str, torch.Tensor]:
        """Moments keyed by parameter name, plus one step counter per group."""
        table: dict[str, torch.Tensor] = {}
        for group in self.param_groups:
            table[f"optim.step.{group['name']}"] = torch.tensor([float(group["step"])])
            for p in group["params"]:
                if p in self.state and self.state[p]:
                    table[f"optim.exp_avg.{names[p]}"] = self.state[p]["exp_avg"]
                    table[f"optim.exp_avg_sq.{names[p]}"] = self.state[p]["exp_avg_sq"]
        return table

    def import_state(self, names: Mapping[torch.Tensor, str], table: Mapping[str, torch.Tensor]) -> None:
        for group in self.param_groups:
            key = f"optim.step.{group['name']}"
            if key in table:
                group["step"] = int(table[key].item())
            for p in group["params"]:
                name = names[p]
                if f"optim.exp_avg.{name}" in table:
                    self.state[p]["exp_avg"] = table[f"optim.exp_avg.{name}"].to(p.dtype).clone()
                    self.state[p]["exp_avg_sq"] = table[f"optim.exp_avg_sq.{name}"].to(p.dtype).clone()


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_fraction: float
    total_steps: int

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be > 0, got {self.total_steps}")

    @property
    def warmup_steps(self) -> int:
        return math.floor(self.warmup_fraction * self.total_steps + 0.5)


def lr_at_step(schedule: Schedule, step: int) -> float:
    """Linear warmup 0 -> peak, then linear decay peak -> 0 at total_steps.

    The trainer evaluates this at the 0-based step before each update, so the
    first update runs at lr 0 when there is warmup: it only seeds the Adam
    moments and leaves the parameters unchanged.
    """
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    warmup = schedule.warmup_steps
    if step < warmup:
        return schedule.peak_lr * step / warmup
    decay = schedule.total_steps - warmup
    if decay == 0:
        return schedule.peak_lr
    return schedule.peak_lr * (schedule.total_steps - step) / decay


# --- verification ------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Relative errors of analytic (a) against finite-difference (f) gradients.

    per_parameter holds the per-tensor error ||a - f|| / max(||a||, ||f||, 1e-8),
    which decides pass/fail. per_coordinate holds the largest per-coordinate
    error |a - f| / max(|a|, |f|, 1e-8) of each tensor, reported alongside.
    """

    tol: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    per_coordinate: dict[str, float] = field(default_factory=dict)
    max_abs_error: float = 0.0
    max_coordinate_rel_error: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max(self.per_parameter.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        worst = max(self.per_parameter, key=self.per_parameter.get, default="-")
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {len(self.per_parameter)} tensors, max rel err {self.max_rel_error:.3e} "
            f"(worst: {worst}), max coordinate rel err {self.max_coordinate_rel_error:.3e}, "
            f"max abs err {self.max_abs_error:.3e}, tol {self.tol:g}"
        )


def grad_check(
    computation: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor],
    tol: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients of a scalar computation to central differences.

    Parameters are perturbed in place one coordinate at a time and restored.
    Run the computation in double precision and with dropout disabled.
    """
    named = dict(params) if isinstance(params, Mapping) else {
        str(i): p for i, p in enumerate(params)
    }
    tensors = list(named.values())

    loss = computation()
    if loss.numel() != 1:
        raise ValueError(f"grad_check needs a scalar computation, got shape {tuple(loss.shape)}")
    if loss.requires_grad:
        analytic = torch.autograd.grad(loss, tensors, allow_unused=True)
    else:
        analytic = (None,) * len(tensors)

    report = GradCheckReport(tol=tol)
    for (name, p), a in zip(named.items(), analytic):
        a = torch.zeros_like(p) if a is None else a.detach()
        numeric = torch.zeros_like(p)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = computation().item()
                flat[i] = original - h
                minus = computation().item()
                flat[i] = original
                numeric.view(-1)[i] = (plus - minus) / (2 * h)

        diff = (a - numeric).abs()
        scale = max(a.norm().item(), numeric.norm().item(), 1e-8)
        report.per_parameter[name] = (a - numeric).norm().item() / scale
        report.max_abs_error = max(report.max_abs_error, diff.max().item() if diff.numel() else 0.0)
        coord_scale = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.full_like(a, 1e-8))
        report.per_coordinate[name] = (diff / coord_scale).max().item() if diff.numel() else 0.0
        report.max_coordinate_rel_error = max(report.max_coordinate_rel_error, report.per_coordinate[name])
        log(f"{name}: rel err {report.per_parameter[name]:.3e}, coordinate {report.per_coordinate[name]:.3e}")

    return report


# --- randomness --------------------------------------------------------------


@dataclass(frozen=True)
class Seeds:
    """Independent streams split from one run seed: init, data, dropout."""

    seed: int
    init: int
    data: int
    dropout: int

    @classmethod
    def from_seed(cls, seed: int) -> Seeds:
        init, data, drop = (
            int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(3)
        )
        return cls(seed=seed, init=init, data=data, dropout=drop)

    def init_generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(self.init)

    def data_rng(self, *keys: int) -> np.random.Generator:
        return np.random.default_rng([self.data, *keys])

    def dropout_generator(self, step: int) -> torch.Generator:
        state = np.random.SeedSequence([self.dropout, step]).generate_state(1)[0]
        return torch.Generator().manual_seed(int(state))


# purpose keys for Seeds.data_rng
DATA_WORLD = 0
DATA_TRM_TRAIN = 1
DATA_TRM_EVAL = 2
DATA_QA_TRAIN = 3
DATA_QA_EVAL = 4
DATA_ORDER = 5
DATA_FRAMES = 6


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


class NumericError(ArithmeticError):
    """Raised when a value that must be finite is not."""

    pass
