"""
Optim - AdamW over a ParameterMap
Bias-corrected moments with decoupled weight decay. Frozen names are
skipped entirely: no moment update, no decay.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional

import numpy as np

from unicontrol_desk.models.errors import ConfigError
from unicontrol_desk.models.grad_core import ParameterMap

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """First and second moments per parameter plus the shared step count."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """
    AdamW with the same update order as the common deep-learning libraries:

        p <- p - lr * wd * p
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)

    Moments and the update are computed in float64 and stored back in the
    parameter's dtype.
    """

    def __init__(
        self,
        params: ParameterMap,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        betas: tuple = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
        if not all(0 <= b < 1 for b in betas):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        self.params = params
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.state = AdamWState()

    def step(self, names: Optional[Iterable[str]] = None) -> int:
        """
        Apply one update to every trainable parameter with a gradient.

        Args:
            names: Restrict the update to these names (default: all trainable)

        Returns:
            Number of tensors updated
        """
        self.state.step += 1
        t = self.state.step
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        selected = self.params.trainable() if names is None else list(names)
        updated = 0
        for name in selected:
            if name in self.params.frozen:
                continue
            tensor = self.params[name]
            if tensor.grad is None:
                continue
            g = tensor.grad.astype(np.float64)
            m = self.state.m.get(name)
            v = self.state.v.get(name)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.state.m[name] = m
            self.state.v[name] = v

            p = tensor.data.astype(np.float64)
            p = p - self.lr * self.weight_decay * p
            p = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            self.params.assign(name, p)
            updated += 1
        logger.debug("adamw step %d: updated %d tensors", t, updated)
        return updated
