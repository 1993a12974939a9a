"""Reverse-mode gradients over named parameter groups, Adam, and an FD referee.

The tape is torch's autograd graph; custom primitives (the splat compositor)
register their own analytic backward. ``backward`` returns plain gradient
tensors keyed by parameter name, which ``adam_step`` consumes.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DomainError, NumericError

log = logging.getLogger(__name__)

# incremented by every call; lets callers assert that no optimization ran
COUNTERS = {"backward": 0, "adam_step": 0}


class ParamStore:
    """Ordered, uniquely named leaf tensors with per-group trainable flags."""

    def __init__(self):
        self._params: dict[str, torch.Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        if name in self._params:
            raise DomainError(f"duplicate parameter name {name!r}")
        self._params[name] = None
        self._trainable[name] = trainable
        return self.replace(name, value)

    def bind(self, name: str, tensor: torch.Tensor, trainable: bool = True) -> torch.Tensor:
        """Register an existing leaf (e.g. a module parameter) without copying it."""
        if name in self._params:
            raise DomainError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        self._trainable[name] = trainable
        tensor.requires_grad_(trainable)
        return tensor

    def remove(self, name: str) -> None:
        del self._params[name]
        del self._trainable[name]

    def replace(self, name: str, value) -> torch.Tensor:
        """Swap a group's tensor (shape may change, e.g. after densification)."""
        if name not in self._params:
            raise KeyError(name)
        old = self._params[name]
        if isinstance(old, torch.nn.Parameter):
            # bound module parameters are updated in place so the module sees the change
            with torch.no_grad():
                old.data = torch.as_tensor(value, dtype=old.dtype).detach().clone()
            return old
        t = torch.as_tensor(value).detach().clone()
        t.requires_grad_(self._trainable[name] and t.is_floating_point())
        self._params[name] = t
        return t

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._params[name].requires_grad_(flag)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[str]:
        return [n for n, flag in self._trainable.items() if flag]

    def numpy(self) -> dict[str, np.ndarray]:
        return {n: t.detach().numpy() for n, t in self._params.items()}


def backward(loss: torch.Tensor, params: ParamStore, names=None) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every (trainable) group; unused groups get zeros."""
    if loss.numel() != 1:
        raise DomainError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NumericError(f"loss is {loss.item()}")
    COUNTERS["backward"] += 1
    names = list(params.trainable() if names is None else names)
    tensors = [params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    out = {}
    for n, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for parameter {n!r}")
        out[n] = g
    return out


@dataclass
class AdamState:
    lr: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def remap(self, name: str, source_index) -> None:
        """Reindex a group's moments after points were cloned or removed."""
        if name not in self.m:
            return
        idx = torch.as_tensor(source_index, dtype=torch.long)
        self.m[name] = self.m[name][idx].clone()
        self.v[name] = self.v[name][idx].clone()

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)


def adam_step(params: ParamStore, grads: dict[str, torch.Tensor], state: AdamState) -> None:
    """In-place bias-corrected Adam update of every group present in ``grads``."""
    state.step += 1
    COUNTERS["adam_step"] += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise DomainError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
            m = state.m.get(name)
            if m is None or m.shape != p.shape:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            lr = state.lr.get(name, state.lr.get("default", 1e-3))
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


class GradientMonitor:
    """Warns about trainable groups that never receive a nonzero gradient."""

    def __init__(self):
        self.seen: dict[str, bool] = {}

    def update(self, grads: dict[str, torch.Tensor]) -> None:
        for n, g in grads.items():
            self.seen[n] = self.seen.get(n, False) or bool((g != 0).any())

    def check(self, label: str = "epoch") -> list[str]:
        dead = sorted(n for n, ok in self.seen.items() if not ok)
        if dead:
            warnings.warn(f"trainable parameters without gradient over the {label}: {', '.join(dead)}",
                          RuntimeWarning, stacklevel=2)
        self.seen.clear()
        return dead


# ----------------------------------------------------------------------------


@dataclass
class FDReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: int | None
    per_param: dict[str, float]
    checked: int

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def fd_check(fn, params: dict[str, torch.Tensor], step: float = 1e-6, tolerance: float = 1e-3,
             coords_per_group: int = 64, seed: int = 0, rel_floor: float = 1e-6) -> FDReport:
    """Compare autograd gradients of ``fn()`` with central differences.

    ``fn`` is a zero-argument closure over ``params`` returning a scalar. Up to
    ``coords_per_group`` random coordinates of each group are perturbed in
    place. The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, rel_floor * max(1, max_i |a_i|))``.
    Failures are reported, never raised.
    """
    names = list(params)
    for t in params.values():
        t.requires_grad_(True)
    loss = fn()
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    rng = np.random.default_rng(seed)
    per, worst, worst_name, worst_idx, checked = {}, 0.0, None, None, 0
    for name, g in zip(names, grads):
        p = params[name]
        g = torch.zeros_like(p) if g is None else g.detach()
        flat_g = g.reshape(-1)
        size = flat_g.numel()
        picks = np.arange(size) if size <= coords_per_group else np.sort(rng.choice(size, coords_per_group, replace=False))
        floor = rel_floor * max(1.0, float(flat_g.abs().max()) if size else 1.0)
        group_worst = 0.0
        with torch.no_grad():
            flat_p = p.view(-1)
            for j in picks:
                orig = flat_p[j].item()
                flat_p[j] = orig + step
                fp = float(fn())
                flat_p[j] = orig - step
                fm = float(fn())
                flat_p[j] = orig
                num = (fp - fm) / (2.0 * step)
                ana = float(flat_g[j])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                checked += 1
                if err > group_worst:
                    group_worst = err
                if err > worst:
                    worst, worst_name, worst_idx = err, name, int(j)
        per[name] = group_worst
    report = FDReport(worst, worst_name, worst_idx, per, checked)
    if not report.ok(tolerance):
        log.warning("fd_check: max relative error %.3g at %s[%s]", worst, worst_name, worst_idx)
    return report
