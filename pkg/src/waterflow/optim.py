"""AdamW with decoupled weight decay on the autodiff parameter store."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParameterStore
from .errors import ContractError


@dataclass
class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def ensure(self, params: ParameterStore) -> None:
        for name, t in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            elif self.m[name].shape != t.data.shape:
                raise ContractError(f"optimizer state for {name!r} has dims {self.m[name].shape}, parameter has {t.data.shape}")


def adamw_step(
    params: ParameterStore,
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> list[str]:
    """Apply one update; returns names of tensors skipped for non-finite gradients."""
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    state.ensure(params)
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    skipped: list[str] = []
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            continue
        g = g.astype(p.data.dtype, copy=False)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - lr * update.astype(p.data.dtype, copy=False)
    return skipped
