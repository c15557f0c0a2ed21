import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cadvae import CaDVAE

FAST = dict(d=3, hidden=16, prior_hidden=8, batch_size=16, beta_anneal_steps=20, max_epochs=2)


@pytest.fixture(scope="module")
def fitted(small_world):
    ds, schema = small_world
    est = CaDVAE(schema=schema, **FAST).fit(ds.matrix(ds.split["train"]))
    return est, ds


def test_params_and_clone(small_world):
    _, schema = small_world
    est = CaDVAE(schema=schema, d=5, gamma1=0.3)
    params = est.get_params()
    assert params["d"] == 5 and params["gamma1"] == 0.3 and params["schema"] is schema
    twin = clone(est).set_params(d=6)
    assert twin.d == 6 and est.d == 5


def test_not_fitted(small_world):
    ds, schema = small_world
    with pytest.raises(NotFittedError):
        CaDVAE(schema=schema).transform(ds.matrix())


def test_fit_requires_schema(small_world):
    ds, _ = small_world
    with pytest.raises(ValueError):
        CaDVAE().fit(ds.matrix())


def test_transform_predict_score(fitted):
    est, ds = fitted
    users = ds.split["test"]
    X_in, targets = ds.heldout(users)
    Z = est.transform(X_in)
    assert Z.shape == (len(users), 4 * 3)
    rec = est.predict(X_in)
    assert rec.shape == (len(users), 100)
    for u in range(len(users)):
        shown = rec[u][rec[u] >= 0]
        assert not np.intersect1d(shown, X_in[u].indices).size
        assert len(shown) == ds.n_items - X_in[u].nnz
    assert 0 <= est.score(X_in, targets) <= 1
    assert est.decision_function(X_in.toarray()).shape == (len(users), ds.n_items)
    assert est.adjacency_.shape == (4, 4)


def test_wrong_width(fitted):
    est, ds = fitted
    with pytest.raises(ValueError):
        est.transform(np.ones((2, ds.n_items + 1)))
    with pytest.raises(ValueError):
        est.transform(np.zeros((2, ds.n_items)))


def test_fit_with_validation(small_world):
    ds, schema = small_world
    X_in, targets = ds.heldout(ds.split["validation"])
    est = CaDVAE(schema=schema, **FAST).fit(ds.matrix(ds.split["train"]), validation=(X_in, targets))
    assert "validation" in est.history_[0]
