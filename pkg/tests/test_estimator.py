import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dynln.data import SyntheticSpec, gen_synthetic
from dynln.estimator import DLNAcousticModel
from dynln.validation import check_groups, check_sequences, check_targets


def _xy(split="train"):
    spec = SyntheticSpec(num_speakers=4, utterances_per_speaker=6, frame_dim=5, num_classes=3,
                         len_min=4, len_max=8, held_out=2, seed=5)
    ds = gen_synthetic(spec)[split]
    return [u.frames for u in ds], [u.labels + 10 for u in ds], [u.speaker_id for u in ds]


def _small(**kw):
    base = dict(num_layers=1, cell_size=8, proj_size=4, summary_size=3, epochs=2, batch_size=4)
    base.update(kw)
    return DLNAcousticModel(**base)


def test_get_params_and_clone():
    est = _small(lam=2.0)
    params = est.get_params()
    assert params["lam"] == 2.0 and params["cell_size"] == 8
    assert clone(est).get_params() == params


def test_fit_predict_shapes_and_labels():
    X, y, g = _xy()
    est = _small().fit(X, y, groups=g)
    assert list(est.classes_) == [10, 11, 12]
    pred = est.predict(X)
    assert [len(p) for p in pred] == [len(x) for x in X]
    assert set(np.concatenate(pred)) <= {10, 11, 12}
    proba = est.predict_proba(X[:2])
    for p in proba:
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert 0.0 <= est.score(X, y) <= 1.0


def test_predict_matches_batched_model():
    X, y, _ = _xy()
    est = _small(dln=True, lam=0.5).fit(X, y)
    from dynln.data import Dataset, Utterance
    from dynln.train import evaluate
    ds = Dataset([Utterance(x.astype(np.float32), (t - 10).astype(np.int32), "s", str(i))
                  for i, (x, t) in enumerate(zip(X, y))], 5)
    fer = evaluate(est.model_, ds, batch_size=5)["fer"]
    assert est.score(X, y) == pytest.approx(1 - fer / 100, abs=1e-12)


def test_transform_gives_summaries():
    X, y, _ = _xy()
    est = _small(dln=True).fit(X, y)
    Z = est.transform(X, layer=1, direction="bwd")
    assert Z.shape == (len(X), 3) and np.all(np.abs(Z) < 1)
    with pytest.raises(ValueError):
        est.transform(X, layer=2)
    with pytest.raises(ValueError):
        _small(dln=False).fit(X, y).transform(X)


def test_unfitted_and_bad_inputs():
    X, y, _ = _xy()
    with pytest.raises(NotFittedError):
        _small().predict(X)
    est = _small(epochs=0).fit(X, y)
    with pytest.raises(ValueError):
        est.predict([np.ones((3, 4))])
    with pytest.raises(ValueError):
        est.score(X[:1], [np.array([10] * (len(X[0]) + 1))])


def test_fit_is_deterministic():
    X, y, _ = _xy()
    a = _small(random_state=3).fit(X, y).predict_proba(X)
    b = _small(random_state=3).fit(X, y).predict_proba(X)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_eval_set_selects_best_epoch():
    X, y, _ = _xy()
    Xd, yd, _ = _xy("dev")
    est = _small(epochs=3).fit(X, y, eval_set=(Xd, yd))
    best = min(m.dev_fer for m in est.history_)
    assert (1 - est.score(Xd, yd)) * 100 == pytest.approx(best, abs=1e-9)


def test_check_sequences():
    assert check_sequences(np.ones((3, 2)))[0].shape == (3, 2)
    with pytest.raises(ValueError):
        check_sequences([])
    with pytest.raises(ValueError):
        check_sequences([np.ones(3)])
    with pytest.raises(ValueError):
        check_sequences([np.ones((2, 2)), np.ones((2, 3))])
    with pytest.raises(ValueError):
        check_sequences([np.array([[np.nan]])])


def test_check_targets_and_groups():
    X = [np.ones((2, 1)), np.ones((3, 1))]
    assert check_targets([[0, 1], [1.0, 2.0, 0.0]], X)[1].dtype.kind == "i"
    with pytest.raises(ValueError):
        check_targets([[0, 1]], X)
    with pytest.raises(ValueError):
        check_targets([[0, 1], [0, 1]], X)
    with pytest.raises(ValueError):
        check_targets([[0, 1], [0.5, 1, 2]], X)
    assert check_groups(None, 2) == ["spk", "spk"]
    with pytest.raises(ValueError):
        check_groups(["a"], 2)
