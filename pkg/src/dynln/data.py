"""Utterance datasets: synthetic multi-speaker generation, on-disk containers,
padded batching, and the summary-vector export / clustering analysis."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .tensor import no_grad


class CorruptContainerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Utterance:
    frames: np.ndarray  # [T, D] float32
    labels: np.ndarray  # [T] int32
    speaker_id: str
    utterance_id: str

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"{self.utterance_id}: frames must be [T>=1, D], got {frames.shape}")
        if labels.shape != (frames.shape[0],):
            raise ValueError(f"{self.utterance_id}: {labels.shape[0]} labels for "
                             f"{frames.shape[0]} frames")
        if not np.isfinite(frames).all():
            raise ValueError(f"{self.utterance_id}: non-finite features")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "labels", labels)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.speaker_id == other.speaker_id and self.utterance_id == other.utterance_id
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.labels, other.labels))


@dataclass(eq=False)
class Dataset:
    utterances: list[Utterance] = field(default_factory=list)
    frame_dim: int | None = None

    def __post_init__(self):
        dims = {u.frames.shape[1] for u in self.utterances}
        if len(dims) > 1:
            raise ValueError(f"mixed frame dimensions {sorted(dims)}")
        if dims:
            dim = dims.pop()
            if self.frame_dim is not None and self.frame_dim != dim:
                raise ValueError(f"frame_dim {self.frame_dim} but frames have {dim}")
            self.frame_dim = dim

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.frame_dim == other.frame_dim and self.utterances == other.utterances

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances})

    @property
    def num_frames(self) -> int:
        return sum(u.num_frames for u in self.utterances)

    def max_label(self) -> int:
        return max((int(u.labels.max()) for u in self.utterances), default=-1)


# synthetic data -------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Frames are ``gain_s * prototype_c + offset_s + noise``.

    Gains are ``exp(gain_std * z)`` per dimension and offsets ``offset_std * z'``,
    where ``z`` and ``z'`` have unit mean-square entries. With ``speaker_rank``
    set, both come from ``speaker_rank`` latent speaker factors mapped through a
    shared basis. For ``speaker_subspace="prototype"`` that basis spans the
    leading directions along which the class prototypes differ, so a speaker
    shift can mimic a class change. ``fixed_norm`` gives every speaker factor
    vector the same length, so speakers differ in direction only.
    ``speaker_rank=None`` draws every dimension independently.

    Labels follow a Markov walk that keeps the current class with probability
    ``stay_prob``. The last ``held_out`` speakers are split between dev and test
    and never appear in train; with ``held_out=0`` each speaker's utterances
    are split 80/10/10 instead.
    """

    num_speakers: int = 16
    utterances_per_speaker: int = 40
    frame_dim: int = 16
    num_classes: int = 8
    len_min: int = 20
    len_max: int = 40
    noise: float = 0.3
    seed: int = 0
    held_out: int = 4
    gain_std: float = 0.1
    offset_std: float = 1.0
    stay_prob: float = 0.5
    speaker_rank: int | None = 4
    speaker_subspace: str = "prototype"
    fixed_norm: bool = True

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.len_min < 1 or self.len_max < self.len_min:
            raise ValueError("invalid length range")
        if self.frame_dim < 1 or self.utterances_per_speaker < 1:
            raise ValueError("frame_dim and utterances_per_speaker must be positive")
        if self.noise < 0 or self.gain_std < 0 or self.offset_std < 0:
            raise ValueError("noise and speaker spreads must be non-negative")
        if self.speaker_rank is not None and self.speaker_rank < 1:
            raise ValueError("speaker_rank must be positive or None")
        if self.speaker_subspace not in ("prototype", "random"):
            raise ValueError("speaker_subspace must be 'prototype' or 'random'")
        if not 0 <= self.stay_prob <= 1:
            raise ValueError("stay_prob must lie in [0, 1]")
        if self.held_out:
            if self.held_out < 2:
                raise ValueError("held_out needs at least 2 speakers (dev and test)")
            if self.held_out >= self.num_speakers:
                raise ValueError(f"cannot hold out {self.held_out} of {self.num_speakers} "
                                 "speakers and still train")


def markov_labels(rng: np.random.Generator, n: int, num_classes: int, stay_prob: float) -> np.ndarray:
    labels = np.empty(n, dtype=np.int32)
    labels[0] = rng.integers(num_classes)
    stays = rng.random(n) < stay_prob
    jumps = rng.integers(1, num_classes, size=n)
    for t in range(1, n):
        labels[t] = labels[t - 1] if stays[t] else (labels[t - 1] + jumps[t]) % num_classes
    return labels


def render_frames(prototypes: np.ndarray, gain: np.ndarray, offset: np.ndarray,
                  labels: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    frames = gain * prototypes[labels] + offset
    if noise > 0:
        frames = frames + noise * rng.standard_normal(frames.shape)
    return frames.astype(np.float32)


@dataclass
class SyntheticWorld:
    """The latent draws behind a synthetic dataset (for oracles and analysis)."""

    prototypes: np.ndarray
    gains: dict[str, np.ndarray]
    offsets: dict[str, np.ndarray]


def _speaker_basis(rng: np.random.Generator, prototypes: np.ndarray, rank: int,
                   kind: str) -> np.ndarray:
    """``[D, rank]`` basis whose columns have unit mean-square entries per dimension."""
    D = prototypes.shape[1]
    if kind == "prototype" and rank < prototypes.shape[0]:
        # leading directions along which the class prototypes differ
        _, _, vt = np.linalg.svd(prototypes - prototypes.mean(axis=0), full_matrices=False)
        basis = vt[:rank].T
        mix = np.linalg.qr(rng.standard_normal((rank, rank)))[0]
        return basis @ mix * np.sqrt(D / rank)
    return rng.standard_normal((D, rank)) / np.sqrt(rank)


def _factors(rng: np.random.Generator, n: int, rank: int, fixed_norm: bool) -> np.ndarray:
    z = rng.standard_normal((n, rank))
    if fixed_norm:
        # every speaker equally far from the canonical voice; only the direction varies
        z *= np.sqrt(rank) / np.linalg.norm(z, axis=1, keepdims=True)
    return z


def gen_synthetic(spec: SyntheticSpec, return_world: bool = False):
    """Deterministic train/dev/test split dict (plus the latent world if asked)."""
    rng = np.random.default_rng(spec.seed)
    D, C = spec.frame_dim, spec.num_classes
    prototypes = rng.standard_normal((C, D))
    speakers = [f"spk{s:03d}" for s in range(spec.num_speakers)]
    n = spec.num_speakers
    if spec.speaker_rank is None:
        # one gain row then one offset row per speaker
        draws = rng.standard_normal((n, 2, D))
        g_raw, o_raw = draws[:, 0], draws[:, 1]
    else:
        r = spec.speaker_rank
        basis_g = _speaker_basis(rng, prototypes, r, spec.speaker_subspace)
        basis_o = _speaker_basis(rng, prototypes, r, spec.speaker_subspace)
        g_raw = _factors(rng, n, r, spec.fixed_norm) @ basis_g.T
        o_raw = _factors(rng, n, r, spec.fixed_norm) @ basis_o.T
    gains = {s: np.exp(spec.gain_std * g_raw[i]) for i, s in enumerate(speakers)}
    offsets = {s: spec.offset_std * o_raw[i] for i, s in enumerate(speakers)}
    by_speaker: dict[str, list[Utterance]] = {}
    for s in speakers:
        utts = []
        for k in range(spec.utterances_per_speaker):
            T = int(rng.integers(spec.len_min, spec.len_max + 1))
            labels = markov_labels(rng, T, C, spec.stay_prob)
            frames = render_frames(prototypes, gains[s], offsets[s], labels, spec.noise, rng)
            utts.append(Utterance(frames, labels, s, f"{s}_u{k:04d}"))
        by_speaker[s] = utts

    splits: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": []}
    if spec.held_out:
        n_train = spec.num_speakers - spec.held_out
        held = speakers[n_train:]
        n_dev = (len(held) + 1) // 2
        for s in speakers[:n_train]:
            splits["train"].extend(by_speaker[s])
        for s in held[:n_dev]:
            splits["dev"].extend(by_speaker[s])
        for s in held[n_dev:]:
            splits["test"].extend(by_speaker[s])
    else:
        for s in speakers:
            utts = by_speaker[s]
            n = len(utts)
            a, b = int(round(0.8 * n)), int(round(0.9 * n))
            splits["train"].extend(utts[:a])
            splits["dev"].extend(utts[a:b])
            splits["test"].extend(utts[b:])
    out = {k: Dataset(v, frame_dim=D) for k, v in splits.items()}
    if return_world:
        return out, SyntheticWorld(prototypes, gains, offsets)
    return out


# containers -------------------------------------------------------------------

MANIFEST = "manifest.json"
FEATURES = "features.f32"
LABELS = "labels.i32"


def save_dataset(dataset: Dataset, path: str) -> None:
    """Directory container: JSON manifest, float32 features blob, int32 labels blob."""
    os.makedirs(path, exist_ok=True)
    entries = []
    f_off = l_off = 0
    for u in dataset:
        entries.append({"utterance_id": u.utterance_id, "speaker_id": u.speaker_id,
                        "shape": list(u.frames.shape), "frame_offset": f_off,
                        "label_offset": l_off})
        f_off += u.frames.size
        l_off += u.num_frames
    manifest = {"format": "dynln-dataset", "version": 1, "frame_dim": dataset.frame_dim,
                "features": FEATURES, "labels": LABELS, "utterances": entries}
    feats = [u.frames.astype("<f4").reshape(-1) for u in dataset]
    labs = [u.labels.astype("<i4") for u in dataset]
    with open(os.path.join(path, FEATURES), "wb") as fh:
        for a in feats:
            fh.write(a.tobytes())
    with open(os.path.join(path, LABELS), "wb") as fh:
        for a in labs:
            fh.write(a.tobytes())
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(path: str) -> Dataset:
    try:
        with open(os.path.join(path, MANIFEST)) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptContainerError(f"malformed manifest in {path}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != "dynln-dataset":
        raise CorruptContainerError(f"{path}: not a dataset container")
    try:
        feats = np.fromfile(os.path.join(path, manifest.get("features", FEATURES)), dtype="<f4")
        labs = np.fromfile(os.path.join(path, manifest.get("labels", LABELS)), dtype="<i4")
    except OSError as exc:
        raise CorruptContainerError(f"{path}: missing blob: {exc}") from exc
    utts = []
    for e in manifest.get("utterances", []):
        try:
            T, D = (int(v) for v in e["shape"])
            fo, lo = int(e["frame_offset"]), int(e["label_offset"])
            uid, spk = str(e["utterance_id"]), str(e["speaker_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptContainerError(f"{path}: malformed manifest entry {e!r}") from exc
        if T < 1 or D < 1:
            raise CorruptContainerError(f"{path}: {uid} has shape {(T, D)}")
        if fo < 0 or lo < 0 or fo + T * D > feats.size or lo + T > labs.size:
            raise CorruptContainerError(f"{path}: {uid} offset out of bounds (truncated blob?)")
        frames = feats[fo:fo + T * D].reshape(T, D).astype(np.float32)
        utts.append(Utterance(frames, labs[lo:lo + T].astype(np.int32), spk, uid))
    try:
        return Dataset(utts, frame_dim=manifest.get("frame_dim"))
    except ValueError as exc:
        raise CorruptContainerError(f"{path}: {exc}") from exc


def save_splits(splits: dict[str, Dataset], root: str) -> None:
    for name, ds in splits.items():
        save_dataset(ds, os.path.join(root, name))


def load_splits(root: str) -> dict[str, Dataset]:
    """Load ``root`` as one container, or its train/dev/test sub-containers."""
    if os.path.exists(os.path.join(root, MANIFEST)):
        return {os.path.basename(os.path.normpath(root)): load_dataset(root)}
    out = {}
    for name in ("train", "dev", "test"):
        sub = os.path.join(root, name)
        if os.path.exists(os.path.join(sub, MANIFEST)):
            out[name] = load_dataset(sub)
    if not out:
        raise FileNotFoundError(f"no dataset container under {root}")
    return out


# batching ---------------------------------------------------------------------

def pad_batch(utts: Sequence[Utterance]):
    """Time-major ``frames [T, B, D]``, ``labels [T, B]`` and ``mask [T, B]``."""
    if not utts:
        raise ValueError("empty batch")
    T = max(u.num_frames for u in utts)
    B, D = len(utts), utts[0].frames.shape[1]
    frames = np.zeros((T, B, D))
    labels = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B))
    for b, u in enumerate(utts):
        n = u.num_frames
        frames[:n, b] = u.frames
        labels[:n, b] = u.labels
        mask[:n, b] = 1.0
    return frames, labels, mask


def make_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator | None,
                 pool_batches: int = 32) -> list[list[Utterance]]:
    """Length-bucketed batches.

    Utterances are shuffled, grouped into pools of ``pool_batches`` batches,
    sorted by length within a pool, cut into batches, and the batch order is
    shuffled again. ``rng=None`` keeps dataset order (no shuffling).
    """
    idx = np.arange(len(dataset))
    if rng is not None:
        idx = rng.permutation(idx)
    pool = batch_size * pool_batches
    batches = []
    for start in range(0, len(idx), pool):
        chunk = sorted(idx[start:start + pool], key=lambda i: (dataset[i].num_frames, i))
        for b in range(0, len(chunk), batch_size):
            batches.append([dataset[i] for i in chunk[b:b + batch_size]])
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


# summary analysis -------------------------------------------------------------

@dataclass
class SummaryRecord:
    utterance_id: str
    speaker_id: str
    layer: int
    direction: str
    vector: np.ndarray


def export_summaries(model, dataset: Iterable[Utterance], layers: Sequence[int]) -> list[SummaryRecord]:
    """Summary vectors of the requested (1-based) layers, both directions, per utterance."""
    from .recurrent import DIRECTIONS, stack_forward

    cfg = model.config
    if not cfg.dln_enabled:
        raise ValueError("summary export needs a DLN model")
    for l in layers:
        if not 1 <= l <= cfg.num_layers:
            raise ValueError(f"layer {l} outside 1..{cfg.num_layers}")
    records = []
    with no_grad():
        for u in dataset:
            _, summaries = stack_forward(model, u.frames.astype(np.float64))
            for l in layers:
                for k, direction in enumerate(DIRECTIONS):
                    records.append(SummaryRecord(u.utterance_id, u.speaker_id, l, direction,
                                                 summaries[l - 1][k].data.copy()))
    return records


def write_summaries(records: Sequence[SummaryRecord], path: str) -> None:
    """Tab-separated rows: utterance id, speaker id, layer, direction, features."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in records:
            w.writerow([r.utterance_id, r.speaker_id, r.layer, r.direction]
                       + [repr(float(v)) for v in r.vector])


def read_summaries(path: str) -> list[SummaryRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh, delimiter="\t"):
            out.append(SummaryRecord(row[0], row[1], int(row[2]), row[3],
                                     np.array([float(v) for v in row[4:]])))
    return out


def cluster_purity(records: Sequence[SummaryRecord], k: int, seed: int = 0) -> float:
    """Purity of seeded k-means clusters against speaker labels."""
    if not records:
        raise ValueError("no records to cluster")
    if k < 1 or k > len(records):
        raise ValueError(f"k={k} must lie in 1..{len(records)}")
    X = np.stack([r.vector for r in records])
    speakers = np.array([r.speaker_id for r in records])
    if k == 1:
        assign = np.zeros(len(records), dtype=int)
    else:
        assign = KMeans(n_clusters=k, n_init=10, random_state=seed).fit_predict(X)
    total = 0
    for c in np.unique(assign):
        _, counts = np.unique(speakers[assign == c], return_counts=True)
        total += counts.max()
    return total / len(records)


def modal_speaker_frequency(records: Sequence[SummaryRecord]) -> float:
    _, counts = np.unique([r.speaker_id for r in records], return_counts=True)
    return counts.max() / counts.sum()
