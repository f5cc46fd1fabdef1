"""Dynamic layer normalization: utterance summaries, LN-parameter generation,
and the summary-variance penalty."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .norm import GateLnParams, LnParams
from .tensor import Tensor, as_tensor, concat, mul, tanh

GATES = ("i", "f", "o", "g")
GATE_TARGETS = ("scale_x", "scale_h", "shift")
CELL_TARGETS = ("scale", "shift")


@dataclass
class SummarizerParams:
    W_a: Tensor  # [p', in_dim]
    b_a: Tensor  # [p']


@dataclass
class GeneratorParams:
    """Linear generators ``v = W a + b`` keyed by ``(gate, target)``.

    ``cell`` holds the optional generators for the cell-state LN, keyed by
    target (``scale``/``shift``).
    """

    gates: dict[tuple[str, str], tuple[Tensor, Tensor]]
    cell: dict[str, tuple[Tensor, Tensor]] | None = None


@dataclass
class AdapterParams:
    summarizer: SummarizerParams
    generator: GeneratorParams


@dataclass
class GeneratedLn:
    gates: GateLnParams
    cell: LnParams | None = field(default=None)


def _as_batch_mask(mask, T: int, B: int) -> np.ndarray:
    if mask is None:
        return np.ones((T, B))
    m = np.asarray(mask, dtype=np.float64)
    return m.reshape(T, B)


def summarize(sp: SummarizerParams, h_seq, mask=None) -> Tensor:
    """Masked time average of tanh(W_a h_t + b_a).

    ``h_seq`` is time-major ``[T, B, in_dim]`` (or ``[T, in_dim]`` for a single
    utterance, giving a ``[p']`` result). Returns ``[B, p']``.
    """
    h_seq = as_tensor(h_seq)
    single = h_seq.ndim == 2
    if single:
        h_seq = h_seq.reshape(h_seq.shape[0], 1, h_seq.shape[1])
    T, B, n_in = h_seq.shape
    p = sp.W_a.shape[0]
    if sp.W_a.shape[1] != n_in:
        raise ValueError(f"summarizer expects input dim {sp.W_a.shape[1]}, got {n_in}")
    m = _as_batch_mask(mask, T, B)
    counts = m.sum(axis=0)
    if (counts <= 0).any():
        raise ValueError("summarize: an utterance has no valid frames")
    z = tanh(h_seq.reshape(T * B, n_in) @ sp.W_a.T + sp.b_a).reshape(T, B, p)
    if (m != 1.0).any():
        z = mul(z, np.broadcast_to(m[:, :, None], (T, B, p)).copy())
    a = mul(z.sum(axis=0), np.broadcast_to((1.0 / counts)[:, None], (B, p)).copy())
    return a.reshape(p) if single else a


def _generate(pairs: list[tuple[Tensor, Tensor]], a: Tensor, rows: int) -> Tensor:
    W = concat([w for w, _ in pairs], axis=0)
    b = concat([b for _, b in pairs], axis=0)
    out = a @ W.T + b
    return out.reshape(a.shape[0], rows, out.shape[1] // rows)


def generate_ln_params(gp: GeneratorParams, a) -> GeneratedLn:
    """Per-utterance LN params from summaries ``a`` of shape ``[B, p']`` (or ``[p']``)."""
    a = as_tensor(a)
    if a.ndim == 1:
        a = a.reshape(1, a.shape[0])
    p = gp.gates[(GATES[0], GATE_TARGETS[0])][0].shape[1]
    if a.shape[1] != p:
        raise ValueError(f"summary length {a.shape[1]} does not match generator input {p}")
    scale_x, scale_h, shift = (
        _generate([gp.gates[(g, t)] for g in GATES], a, len(GATES)) for t in GATE_TARGETS)
    cell = None
    if gp.cell is not None:
        B = a.shape[0]
        scale, shift_c = (
            _generate([gp.cell[t]], a, 1).reshape(B, -1) for t in CELL_TARGETS)
        cell = LnParams(scale, shift_c)
    return GeneratedLn(GateLnParams(scale_x, scale_h, shift), cell)


def summary_variance(summaries) -> Tensor:
    """Mean over layers of the per-feature batch variance, directions averaged.

    ``summaries`` is a list over layers; each entry is a list of ``[B, p']``
    tensors, one per direction. Variance is the population variance over B.
    """
    layer_terms = []
    for per_dir in summaries:
        dir_terms = []
        for a in per_dir:
            a = as_tensor(a)
            # shifting by the first row keeps identical rows at exactly zero
            shifted = a - a[0]
            dev = shifted - shifted.mean(axis=0)
            dir_terms.append((dev * dev).mean(axis=0).mean())
        term = dir_terms[0]
        for t in dir_terms[1:]:
            term = term + t
        layer_terms.append(term * (1.0 / len(dir_terms)))
    total = layer_terms[0]
    for t in layer_terms[1:]:
        total = total + t
    return total * (1.0 / len(layer_terms))


def variance_penalty(summaries, lam: float) -> Tensor:
    """-lam times :func:`summary_variance`; zero for identical summaries or lam=0."""
    if lam < 0:
        raise ValueError("penalty weight must be non-negative")
    return summary_variance(summaries) * (-float(lam))
