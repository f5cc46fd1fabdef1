"""Input checks shared by the estimator wrapper."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def check_sequences(X, n_features: int | None = None) -> list[np.ndarray]:
    """Each item becomes a finite float64 ``[T, D]`` array with ``T >= 1`` and a common ``D``."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if len(X) == 0:
        raise ValueError("no sequences given")
    out = []
    for i, x in enumerate(X):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"sequence {i} must be a non-empty [T, D] array, got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError(f"sequence {i} has non-finite values")
        if n_features is None:
            n_features = x.shape[1]
        elif x.shape[1] != n_features:
            raise ValueError(f"sequence {i} has {x.shape[1]} features, expected {n_features}")
        out.append(x)
    return out


def check_targets(y, X: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Integer-valued label vectors whose lengths match the frame counts of ``X``."""
    if len(y) != len(X):
        raise ValueError(f"{len(X)} sequences but {len(y)} label vectors")
    out = []
    for i, (t, x) in enumerate(zip(y, X)):
        t = np.asarray(t)
        if t.shape != (x.shape[0],):
            raise ValueError(f"labels {i} have shape {t.shape}, expected ({x.shape[0]},)")
        if t.dtype.kind not in "iu":
            if t.dtype.kind != "f" or not np.all(t == np.round(t)):
                raise ValueError(f"labels {i} are not integers")
            t = t.astype(np.int64)
        out.append(t)
    return out


def check_groups(groups, n: int) -> list[str]:
    if groups is None:
        return ["spk"] * n
    if len(groups) != n:
        raise ValueError(f"{n} sequences but {len(groups)} speaker ids")
    return [str(g) for g in groups]
