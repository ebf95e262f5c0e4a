import numpy as np
import pytest
from conftest import tiny_config
from sklearn.base import clone

from ssmm.estimator import MultimodalClassifier, SSLPretrainer

TINY = {k: v for k, v in tiny_config(5).__dict__.items() if k not in ("tabular_in", "volume_shape")}


@pytest.fixture(scope="module")
def xy():
    rng = np.random.default_rng(0)
    n = 24
    y = np.r_[np.ones(n // 2), np.zeros(n // 2)].astype(int)
    vols = rng.normal(size=(n, 12, 12, 12))
    vols[y == 1, 4:8, 4:8, 4:8] += 2.0
    rows = rng.normal(size=(n, 5))
    rows[:, 0] += 1.5 * y
    return (vols, rows), y


def test_params_round_trip():
    est = SSLPretrainer(mode="simclr", epochs=3)
    assert est.get_params()["mode"] == "simclr"
    assert clone(est).get_params() == est.get_params()
    clf = MultimodalClassifier(frozen=True).set_params(patience=2)
    assert clf.patience == 2 and clf.frozen


def test_input_validation(xy):
    (vols, rows), y = xy
    clf = MultimodalClassifier(model_config=TINY)
    with pytest.raises(ValueError):
        clf.fit(vols, y)
    with pytest.raises(ValueError):
        clf.fit((vols[:3], rows), y)
    with pytest.raises(ValueError):
        clf.fit((vols, rows), y + 1)
    bad = rows.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        clf.fit((vols, bad), y)
    with pytest.raises(ValueError):
        SSLPretrainer().fit((None, rows))


def test_unfitted_raises(xy):
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SSLPretrainer().transform(xy[0])


def test_pretrain_then_classify(xy):
    X, y = xy
    pre = SSLPretrainer(epochs=2, warmup=1, batch_size=4, model_config=TINY, seed=1).fit(X)
    z = pre.transform(X)
    assert z.shape == (len(y), 16)
    np.testing.assert_allclose(np.linalg.norm(z[:, :8], axis=1), 1.0, atol=1e-10)
    clf = MultimodalClassifier(
        pretrained_state=pre.state_, max_epochs=2, patience=2, batch_size=4, model_config=TINY, seed=1
    ).fit(X, y)
    proba = clf.predict_proba(X)
    assert proba.shape == (len(y), 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert set(np.unique(clf.predict(X))) <= {0, 1}
    again = MultimodalClassifier(
        pretrained_state=pre.state_, max_epochs=2, patience=2, batch_size=4, model_config=TINY, seed=1
    ).fit(X, y)
    assert again.decision_function(X).tobytes() == clf.decision_function(X).tobytes()
