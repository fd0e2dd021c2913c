"""Fast Gradient Sign Method sample generation.

A single-step true-label attack: perturb each input by ``epsilon`` in the
direction that increases the classification loss the fastest, coordinate
by coordinate. Labels are carried over unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .models import ModelSpec, ParamSet, forward

__all__ = ["AttackConfig", "fgsm", "epsilon_from_raw"]

RAW_PIXEL_RANGE = 255.0

LossFn = Callable[[ParamSet, Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation budget and the valid value range of the attacked data.

    ``epsilon`` is expressed on the same scale as the data itself (see
    :func:`epsilon_from_raw` for converting budgets quoted in raw 0-255
    pixel units). ``clip`` keeps perturbed values inside ``value_range``.
    """

    epsilon: float
    value_range: tuple[float, float] = (0.0, 255.0)
    clip: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")
        lo, hi = self.value_range
        if not lo < hi:
            raise ContractError(f"value_range must satisfy lo < hi, got {self.value_range}")

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return AttackConfig(epsilon=epsilon, value_range=self.value_range, clip=self.clip)


def epsilon_from_raw(eps_raw: float, value_range: tuple[float, float]) -> float:
    """Convert a budget quoted in raw 0-255 pixel units to data units.

    Images stored normalized to ``value_range`` shrink the budget by the
    same factor, so published budgets like 2 or 0.2 stay usable verbatim.
    """
    lo, hi = value_range
    return eps_raw * (hi - lo) / RAW_PIXEL_RANGE


def fgsm(
    spec: ModelSpec,
    params: ParamSet,
    x: Tensor,
    y: np.ndarray,
    cfg: AttackConfig,
    loss_fn: Optional[LossFn] = None,
) -> Tensor:
    """Adversarial counterpart of a labeled batch.

    ``x_adv = x + epsilon * sign(grad_x loss)`` with ``sign(0) = 0``; the
    true labels drive the loss. With ``epsilon == 0`` the input is returned
    bit-exactly. The result is a constant tensor (no graph history).
    """
    if cfg.epsilon == 0.0:
        return Tensor(x.data.copy())
    leaf = Tensor(x.data, requires_grad=True)
    if loss_fn is None:
        loss = ad.cross_entropy(forward(spec, params, leaf), y)
    else:
        loss = loss_fn(params, leaf, y)
    (grad,) = ad.backward(loss, [leaf])
    adv = x.data + cfg.epsilon * np.sign(grad.data)
    if cfg.clip:
        lo, hi = cfg.value_range
        adv = np.clip(adv, lo, hi)
    return Tensor(adv.astype(x.data.dtype, copy=False))
