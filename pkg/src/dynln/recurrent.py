"""LN-LSTMP cells, bidirectional layers, the deep stack and its output layer.

Sequences are time-major: ``[T, B, dim]`` with a ``[T, B]`` validity mask.
Parameter names follow the checkpoint layout, e.g. ``layer1.fwd.W_i``,
``layer2.bwd.gen.f.scale_x.W`` and ``output.W_y``. The gate tag ``g`` is the
cell candidate.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .adapt import (CELL_TARGETS, GATE_TARGETS, GATES, AdapterParams, GeneratedLn,
                    GeneratorParams, SummarizerParams, generate_ln_params, summarize)
from .data import CorruptContainerError
from .norm import DEFAULT_EPS, GateLnParams, LnParams
from .tensor import (NonFiniteError, Tensor, as_tensor, concat, mul, normalize,
                     sigmoid, stack, tanh)

DIRECTIONS = ("fwd", "bwd")


@dataclass
class StackConfig:
    """Architecture of a deep bidirectional LSTMP acoustic model.

    Defaults are the three-layer 512-cell / 256-projection setup with
    123-dim frames and the WSJ state inventory.
    """

    num_layers: int = 3
    cell_size: int = 512
    proj_size: int = 256
    input_dim: int = 123
    num_classes: int = 3436
    dln_enabled: bool = False
    summary_size: int = 64
    dln_cell_state: bool = False
    lam: float = 0.0
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        for name in ("num_layers", "cell_size", "proj_size", "input_dim", "num_classes",
                     "summary_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.proj_size >= self.cell_size:
            raise ValueError("proj_size must be smaller than cell_size")
        if self.dln_enabled and self.summary_size >= self.cell_size:
            raise ValueError("summary_size must be smaller than cell_size")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def layer_input_dim(self, layer: int) -> int:
        return self.input_dim if layer == 1 else 2 * self.proj_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StackConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CellState:
    h: Tensor  # [B, d']
    c: Tensor  # [B, d]


@dataclass
class LstmpLayerParams:
    """Weights of one direction of one layer; static gate LN is absent under DLN."""

    W: dict[str, Tensor]
    U: dict[str, Tensor]
    W_p: Tensor
    gate_ln: GateLnParams | None
    cell_ln: LnParams | None

    @property
    def cell_size(self) -> int:
        return self.W_p.shape[1]

    @property
    def proj_size(self) -> int:
        return self.W_p.shape[0]


@dataclass
class OutputParams:
    W_y: Tensor  # [C, 2d']
    b_y: Tensor  # [C]


def param_shapes(cfg: StackConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable parameter name with its shape, in canonical order."""
    d, dp, p = cfg.cell_size, cfg.proj_size, cfg.summary_size
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(1, cfg.num_layers + 1):
        n_in = cfg.layer_input_dim(l)
        for direction in DIRECTIONS:
            pre = f"layer{l}.{direction}."
            for g in GATES:
                shapes[pre + f"W_{g}"] = (d, n_in)
            for g in GATES:
                shapes[pre + f"U_{g}"] = (d, dp)
            if not cfg.dln_enabled:
                for target in GATE_TARGETS:
                    for g in GATES:
                        shapes[pre + f"{target}_{g}"] = (d,)
            if not (cfg.dln_enabled and cfg.dln_cell_state):
                shapes[pre + "scale_c"] = (d,)
                shapes[pre + "shift_c"] = (d,)
            shapes[pre + "W_p"] = (dp, d)
            if cfg.dln_enabled:
                shapes[pre + "W_a"] = (p, n_in)
                shapes[pre + "b_a"] = (p,)
                for g in GATES:
                    for target in GATE_TARGETS:
                        shapes[pre + f"gen.{g}.{target}.W"] = (d, p)
                        shapes[pre + f"gen.{g}.{target}.b"] = (d,)
                if cfg.dln_cell_state:
                    for target in CELL_TARGETS:
                        shapes[pre + f"gen.cell.{target}.W"] = (d, p)
                        shapes[pre + f"gen.cell.{target}.b"] = (d,)
    shapes["output.W_y"] = (cfg.num_classes, 2 * dp)
    shapes["output.b_y"] = (cfg.num_classes,)
    return shapes


def count_params(cfg: StackConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def format_count(n: int) -> str:
    return f"{n:,} ({n / 1e6:.2f}M)"


# cell and layer ------------------------------------------------------------------

def _stack_gates(ws: dict[str, Tensor]) -> Tensor:
    return concat([ws[g] for g in GATES], axis=0)


def static_gate_ln(params: dict[str, Tensor], prefix: str) -> GateLnParams:
    return GateLnParams(*(stack([params[f"{prefix}{t}_{g}"] for g in GATES], axis=0)
                          for t in GATE_TARGETS))


def _input_branch(W_cat_T: Tensor, x: Tensor, gate_ln: GateLnParams, eps: float) -> Tensor:
    """LN(W_g x; alpha_g, beta_g) for all gates; ``x`` is ``[..., in]``, result ``[..., 4, d]``."""
    lead = x.shape[:-1]
    n = int(np.prod(lead))
    z = x.reshape(n, x.shape[-1]) @ W_cat_T
    z = z.reshape(lead + (len(GATES), z.shape[1] // len(GATES)))
    return normalize(z, eps) * gate_ln.scale_x + gate_ln.shift


def _recurrent_step(xpre: Tensor, prev: CellState, U_cat_T: Tensor, W_p_T: Tensor,
                    gate_ln: GateLnParams, cell_ln: LnParams, eps: float) -> CellState:
    B = xpre.shape[0]
    hh = (prev.h @ U_cat_T).reshape(B, len(GATES), xpre.shape[2])
    pre = xpre + normalize(hh, eps) * gate_ln.scale_h
    ifo = sigmoid(pre[:, 0:3])
    cand = tanh(pre[:, 3])
    c = ifo[:, 1] * prev.c + ifo[:, 0] * cand
    c_ln = normalize(c, eps) * cell_ln.scale + cell_ln.shift
    h = (ifo[:, 2] * tanh(c_ln)) @ W_p_T
    return CellState(h, c)


def zero_state(batch: int, cell_size: int, proj_size: int) -> CellState:
    return CellState(Tensor(np.zeros((batch, proj_size))), Tensor(np.zeros((batch, cell_size))))


def lstmp_step(p: LstmpLayerParams, ln: GeneratedLn | None, x_t, prev: CellState | None = None,
               eps: float = DEFAULT_EPS) -> CellState:
    """One LN-LSTMP step. ``x_t`` is ``[in]`` or ``[B, in]``.

    ``ln`` supplies effective gate/cell LN params; when absent the static
    params stored in ``p`` are used.
    """
    x_t = as_tensor(x_t)
    single = x_t.ndim == 1
    if single:
        x_t = x_t.reshape(1, x_t.shape[0])
    B = x_t.shape[0]
    if x_t.shape[1] != p.W[GATES[0]].shape[1]:
        raise ValueError(f"input dim {x_t.shape[1]} does not match W ({p.W[GATES[0]].shape})")
    gate_ln, cell_ln = _effective_ln(p, ln)
    if prev is None:
        prev = zero_state(B, p.cell_size, p.proj_size)
    elif single and prev.h.ndim == 1:
        prev = CellState(prev.h.reshape(1, -1), prev.c.reshape(1, -1))
    xpre = _input_branch(_stack_gates(p.W).T, x_t, gate_ln, eps)
    state = _recurrent_step(xpre, prev, _stack_gates(p.U).T, p.W_p.T, gate_ln, cell_ln, eps)
    _check_finite(state)
    if single:
        return CellState(state.h.reshape(-1), state.c.reshape(-1))
    return state


def _effective_ln(p: LstmpLayerParams, ln: GeneratedLn | None):
    gate_ln = ln.gates if ln is not None else p.gate_ln
    cell_ln = ln.cell if ln is not None and ln.cell is not None else p.cell_ln
    if gate_ln is None or cell_ln is None:
        raise ValueError("layer has no static LN params and none were generated")
    return gate_ln, cell_ln


def _check_finite(state: CellState) -> None:
    if not (np.isfinite(state.h.data).all() and np.isfinite(state.c.data).all()):
        raise NonFiniteError("non-finite LSTMP activation")


def scan_direction(p: LstmpLayerParams, ln: GeneratedLn | None, inputs: Tensor, mask: np.ndarray,
                   reverse: bool, eps: float) -> Tensor:
    """Run one direction over ``[T, B, in]`` from a zero state; returns ``[T, B, d']``.

    The state is zeroed at padded frames so that, scanning backwards, the first
    valid frame of each utterance starts from a zero state as it would unpadded.
    """
    T, B = inputs.shape[0], inputs.shape[1]
    gate_ln, cell_ln = _effective_ln(p, ln)
    xpre = _input_branch(_stack_gates(p.W).T, inputs, gate_ln, eps)
    U_T, W_p_T = _stack_gates(p.U).T, p.W_p.T
    state = zero_state(B, p.cell_size, p.proj_size)
    outs: list[Tensor | None] = [None] * T
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        state = _recurrent_step(xpre[t], state, U_T, W_p_T, gate_ln, cell_ln, eps)
        m = mask[t]
        if not m.all():
            state = CellState(mul(state.h, np.repeat(m[:, None], p.proj_size, 1)),
                              mul(state.c, np.repeat(m[:, None], p.cell_size, 1)))
        outs[t] = state.h
    return stack(outs, axis=0)


def _seq_and_mask(inputs, mask):
    inputs = as_tensor(inputs)
    if inputs.ndim == 2:
        inputs = inputs.reshape(inputs.shape[0], 1, inputs.shape[1])
    T, B = inputs.shape[0], inputs.shape[1]
    if T < 1:
        raise ValueError("empty sequence")
    m = np.ones((T, B)) if mask is None else np.asarray(mask, dtype=np.float64).reshape(T, B)
    return inputs, m


def bidir_layer(fwd: LstmpLayerParams, bwd: LstmpLayerParams, inputs, mask=None,
                adapters: tuple[AdapterParams, AdapterParams] | None = None,
                eps: float = DEFAULT_EPS):
    """Forward and backward scans concatenated to ``[T, B, 2d']``.

    Returns ``(outputs, summaries)`` where summaries is ``[a_fwd, a_bwd]``
    (each ``[B, p']``) when adapters are given, else ``None``.
    """
    inputs, m = _seq_and_mask(inputs, mask)
    summaries = None
    lns: list[GeneratedLn | None] = [None, None]
    if adapters is not None:
        summaries = []
        for k, ad in enumerate(adapters):
            a = summarize(ad.summarizer, inputs, m)
            summaries.append(a)
            lns[k] = generate_ln_params(ad.generator, a)
    hf = scan_direction(fwd, lns[0], inputs, m, reverse=False, eps=eps)
    hb = scan_direction(bwd, lns[1], inputs, m, reverse=True, eps=eps)
    return concat([hf, hb], axis=2), summaries


# model ------------------------------------------------------------------------

class AcousticModel:
    """Named parameters plus the config that fixes their layout."""

    def __init__(self, config: StackConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ValueError(f"parameter set mismatch; missing={sorted(missing)[:5]} "
                             f"extra={sorted(extra)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer(self, l: int, direction: str) -> LstmpLayerParams:
        pre = f"layer{l}.{direction}."
        P = self.params
        cfg = self.config
        gate_ln = None if cfg.dln_enabled else static_gate_ln(P, pre)
        cell_ln = None
        if pre + "scale_c" in P:
            cell_ln = LnParams(P[pre + "scale_c"], P[pre + "shift_c"])
        return LstmpLayerParams(
            W={g: P[pre + f"W_{g}"] for g in GATES},
            U={g: P[pre + f"U_{g}"] for g in GATES},
            W_p=P[pre + "W_p"], gate_ln=gate_ln, cell_ln=cell_ln)

    def adapter(self, l: int, direction: str) -> AdapterParams:
        if not self.config.dln_enabled:
            raise ValueError("model has no DLN adapters")
        pre = f"layer{l}.{direction}."
        P = self.params
        gates = {(g, t): (P[pre + f"gen.{g}.{t}.W"], P[pre + f"gen.{g}.{t}.b"])
                 for g in GATES for t in GATE_TARGETS}
        cell = None
        if self.config.dln_cell_state:
            cell = {t: (P[pre + f"gen.cell.{t}.W"], P[pre + f"gen.cell.{t}.b"])
                    for t in CELL_TARGETS}
        return AdapterParams(SummarizerParams(P[pre + "W_a"], P[pre + "b_a"]),
                             GeneratorParams(gates, cell))

    @property
    def output(self) -> OutputParams:
        return OutputParams(self.params["output.W_y"], self.params["output.b_y"])

    def forward(self, frames, mask=None):
        return stack_forward(self, frames, mask)

    def copy(self) -> AcousticModel:
        return AcousticModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                           for k, v in self.params.items()})


def stack_forward(model: AcousticModel, frames, mask=None):
    """Logits ``[T, B, C]`` (pre-softmax) and per-layer ``[a_fwd, a_bwd]`` summaries.

    ``frames`` is ``[T, B, D]`` or a single utterance ``[T, D]`` (then logits
    are ``[T, C]``). Summaries is ``None`` for static-LN models.
    """
    cfg = model.config
    x, m = _seq_and_mask(frames, mask)
    single = as_tensor(frames).ndim == 2
    if x.shape[2] != cfg.input_dim:
        raise ValueError(f"frame dim {x.shape[2]} does not match model input_dim {cfg.input_dim}")
    summaries = [] if cfg.dln_enabled else None
    h = x
    for l in range(1, cfg.num_layers + 1):
        adapters = None
        if cfg.dln_enabled:
            adapters = (model.adapter(l, "fwd"), model.adapter(l, "bwd"))
        h, s = bidir_layer(model.layer(l, "fwd"), model.layer(l, "bwd"), h, m, adapters, cfg.eps)
        if summaries is not None:
            summaries.append(s)
    T, B = h.shape[0], h.shape[1]
    out = model.output
    logits = (h.reshape(T * B, h.shape[2]) @ out.W_y.T + out.b_y).reshape(T, B, cfg.num_classes)
    if single:
        logits = logits.reshape(T, cfg.num_classes)
        if summaries is not None:
            summaries = [[a.reshape(-1) for a in s] for s in summaries]
    return logits, summaries


# checkpoints ----------------------------------------------------------------

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.f32"


def save_checkpoint(model: AcousticModel, path: str) -> None:
    """Directory with a JSON manifest and one little-endian float32 blob."""
    os.makedirs(path, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset,
                        "dtype": "float32"})
        chunks.append(p.data.astype("<f4").reshape(-1))
        offset += p.size
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    manifest = {"format": "dynln-checkpoint", "version": 1, "config": model.config.to_dict(),
                "blob": CHECKPOINT_BLOB, "params": entries}
    with open(os.path.join(path, CHECKPOINT_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(path, CHECKPOINT_BLOB), "wb") as fh:
        fh.write(blob.astype("<f4").tobytes())


def load_checkpoint(path: str) -> AcousticModel:
    try:
        with open(os.path.join(path, CHECKPOINT_MANIFEST)) as fh:
            manifest = json.load(fh)
        cfg = StackConfig.from_dict(manifest["config"])
        entries = manifest["params"]
        blob = np.fromfile(os.path.join(path, manifest.get("blob", CHECKPOINT_BLOB)), dtype="<f4")
    except (OSError, KeyError, json.JSONDecodeError, TypeError) as exc:
        raise CorruptContainerError(f"cannot read checkpoint at {path}: {exc}") from exc
    params = {}
    for e in entries:
        n = int(np.prod(e["shape"]))
        if e["offset"] < 0 or e["offset"] + n > blob.size:
            raise CorruptContainerError(f"{e['name']}: offset out of bounds")
        data = blob[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(data, requires_grad=True)
    return AcousticModel(cfg, params)
