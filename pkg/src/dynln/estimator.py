"""scikit-learn style wrapper around the acoustic model and trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Utterance
from .recurrent import DIRECTIONS, StackConfig, stack_forward
from .tensor import no_grad
from .train import TrainConfig, fit, init_model
from .validation import check_groups, check_sequences, check_targets


class DLNAcousticModel(ClassifierMixin, BaseEstimator):
    """Frame classifier over variable-length sequences.

    ``X`` is a list of ``[T, D]`` frame arrays and ``y`` a list of ``[T]`` label
    vectors. ``dln=False`` gives the static layer-norm baseline.
    """

    def __init__(self, num_layers=2, cell_size=32, proj_size=16, summary_size=8, dln=True,
                 lam=0.0, dln_cell_state=False, eps=1e-5, epochs=10, batch_size=16,
                 learning_rate=1e-3, random_state=0):
        self.num_layers = num_layers
        self.cell_size = cell_size
        self.proj_size = proj_size
        self.summary_size = summary_size
        self.dln = dln
        self.lam = lam
        self.dln_cell_state = dln_cell_state
        self.eps = eps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _dataset(self, X, codes, groups, prefix):
        utts = [Utterance(x.astype(np.float32), c.astype(np.int32), g, f"{prefix}{i}")
                for i, (x, c, g) in enumerate(zip(X, codes, groups))]
        return Dataset(utts, frame_dim=self.n_features_in_)

    def _encode(self, y):
        codes = []
        for t in y:
            idx = np.searchsorted(self.classes_, t)
            idx = np.clip(idx, 0, len(self.classes_) - 1)
            if not np.array_equal(self.classes_[idx], t):
                raise ValueError("labels contain classes not seen during fit")
            codes.append(idx)
        return codes

    def fit(self, X, y, groups=None, eval_set=None):
        """Train from scratch; ``groups`` are optional speaker ids, ``eval_set`` a dev ``(X, y)``."""
        X = check_sequences(X)
        y = check_targets(y, X)
        groups = check_groups(groups, len(X))
        self.n_features_in_ = X[0].shape[1]
        self.classes_ = np.unique(np.concatenate(y))
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = StackConfig(num_layers=self.num_layers, cell_size=self.cell_size,
                          proj_size=self.proj_size, input_dim=self.n_features_in_,
                          num_classes=len(self.classes_), dln_enabled=self.dln,
                          summary_size=self.summary_size, dln_cell_state=self.dln_cell_state,
                          lam=self.lam, eps=self.eps)
        train_cfg = TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                                seed=self.random_state, learning_rate=self.learning_rate)
        train = self._dataset(X, self._encode(y), groups, "train")
        dev = None
        if eval_set is not None:
            Xd = check_sequences(eval_set[0], self.n_features_in_)
            yd = check_targets(eval_set[1], Xd)
            dev = self._dataset(Xd, self._encode(yd), check_groups(None, len(Xd)), "dev")
        self.model_ = init_model(cfg, self.random_state)
        self.history_ = fit(self.model_, train, train_cfg, dev)
        return self

    def _forward(self, x):
        return stack_forward(self.model_, x[:, None, :])

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        out = []
        with no_grad():
            for x in check_sequences(X, self.n_features_in_):
                z = self._forward(x)[0].data[:, 0]
                z = np.exp(z - z.max(axis=1, keepdims=True))
                out.append(z / z.sum(axis=1, keepdims=True))
        return out

    def predict(self, X) -> list[np.ndarray]:
        return [self.classes_[p.argmax(axis=1)] for p in self.predict_proba(X)]

    def score(self, X, y, sample_weight=None) -> float:
        """Frame accuracy pooled over every frame of every sequence."""
        pred = self.predict(X)
        y = check_targets(y, check_sequences(X, self.n_features_in_))
        hits = np.concatenate([p == t for p, t in zip(pred, y)])
        return float(np.average(hits, weights=None if sample_weight is None
                                else np.repeat(sample_weight, [len(t) for t in y])))

    def transform(self, X, layer: int = 1, direction: str = "fwd") -> np.ndarray:
        """Utterance summary vectors ``[N, summary_size]`` of one layer and direction."""
        check_is_fitted(self, "model_")
        if not self.dln:
            raise ValueError("transform needs dln=True")
        if direction not in DIRECTIONS or not 1 <= layer <= self.num_layers:
            raise ValueError(f"no summary for layer {layer}, direction {direction!r}")
        k = DIRECTIONS.index(direction)
        with no_grad():
            return np.stack([self._forward(x)[1][layer - 1][k].data[0]
                             for x in check_sequences(X, self.n_features_in_)])
