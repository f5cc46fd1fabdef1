"""Layer normalization with caller-supplied scale and shift.

The scale/shift may be learned parameters (static LN) or vectors generated per
utterance (dynamic LN); both enter the same code path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, normalize

DEFAULT_EPS = 1e-5


@dataclass
class LnConfig:
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"LN eps must be positive, got {self.eps}")


@dataclass
class LnParams:
    """Scale (alpha) and shift (beta), each matching the normalized axis."""

    scale: Tensor
    shift: Tensor

    def __post_init__(self):
        self.scale = as_tensor(self.scale)
        self.shift = as_tensor(self.shift)
        if self.scale.shape[-1:] != self.shift.shape[-1:]:
            raise ValueError(
                f"scale and shift lengths differ: {self.scale.shape} vs {self.shift.shape}")


def ln_stats(x, eps: float = DEFAULT_EPS) -> tuple[float, float]:
    """Mean and stabilized standard deviation sqrt(population var + eps)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("ln_stats of an empty vector")
    mu = x.mean()
    return float(mu), float(np.sqrt(((x - mu) ** 2).mean() + eps))


def layer_norm(x, p: LnParams, cfg: LnConfig | None = None, *, eps: float | None = None) -> Tensor:
    """scale * (x - mu) / sigma + shift over the last axis of ``x``.

    ``eps`` overrides ``cfg`` and may be 0 for analysis of non-constant inputs.
    """
    x = as_tensor(x)
    if eps is None:
        eps = (cfg or LnConfig()).eps
    n = x.shape[-1]
    if p.scale.shape[-1] != n:
        raise ValueError(f"LN params have length {p.scale.shape[-1]}, input has {n}")
    return normalize(x, eps) * p.scale + p.shift


@dataclass
class GateLnParams:
    """Effective LN params for the four gates, stacked on a gate axis.

    Static models carry ``[4, d]`` arrays; generated ones carry ``[B, 4, d]``,
    one row per utterance. There is a single shift per gate, applied in the
    input-to-hidden branch; the hidden-to-hidden branch is scaled only.
    """

    scale_x: Tensor
    scale_h: Tensor
    shift: Tensor
