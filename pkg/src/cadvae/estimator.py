"""scikit-learn compatible estimator around the training loop."""

from __future__ import annotations

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import metrics as M
from .data import ConceptSchema
from .trainer import TrainConfig, UserFeatures, fit, score_users


def _check_interactions(X, n_items=None):
    X = check_array(X, accept_sparse="csr", dtype=np.float32)
    X = sparse.csr_matrix(X)
    if X.nnz and (X.data.min() < 0):
        raise ValueError("interaction matrix must be non-negative")
    X.data[:] = (X.data > 0).astype(np.float32)
    X.eliminate_zeros()
    if n_items is not None and X.shape[1] != n_items:
        raise ValueError(f"X has {X.shape[1]} items, estimator was fitted with {n_items}")
    if np.any(np.diff(X.indptr) == 0):
        raise ValueError("every user needs at least one interaction")
    return X


def _rows(y) -> list:
    if sparse.issparse(y) or isinstance(y, np.ndarray) and y.ndim == 2:
        y = sparse.csr_matrix(y)
        return [y.indices[y.indptr[i]:y.indptr[i + 1]] for i in range(y.shape[0])]
    return [np.asarray(r, dtype=np.int64) for r in y]


class CaDVAE(BaseEstimator, TransformerMixin):
    """Causal disentangled VAE recommender.

    ``X`` is a binary user x item matrix (dense or CSR). Hyperparameters
    mirror :class:`~cadvae.trainer.TrainConfig`; ``schema`` supplies item
    concept labels and the prior DAG.

    Examples
    --------
    >>> est = CaDVAE(schema=schema, d=8, max_epochs=5).fit(X_train)   # doctest: +SKIP
    >>> est.predict(X_foldin)[:, :10]                                  # doctest: +SKIP
    """

    def __init__(self, schema: ConceptSchema | None = None, d=20, beta_max=20.0, beta_anneal_steps=2000,
                 gamma1=1.0, gamma2=1.0, lr=1e-3, batch_size=128, max_epochs=200, patience=20, seed=0,
                 g_mode="monotone", likelihood="multinomial", hidden=600, prior_hidden=32, dropout=0.5,
                 weight_decay=0.0, ablate_causal=False, top_n=100):
        self.schema = schema
        self.d = d
        self.beta_max = beta_max
        self.beta_anneal_steps = beta_anneal_steps
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.g_mode = g_mode
        self.likelihood = likelihood
        self.hidden = hidden
        self.prior_hidden = prior_hidden
        self.dropout = dropout
        self.weight_decay = weight_decay
        self.ablate_causal = ablate_causal
        self.top_n = top_n

    def _config(self) -> TrainConfig:
        params = self.get_params()
        params.pop("schema")
        params.pop("top_n")
        return TrainConfig(**params)

    def fit(self, X, y=None, validation=None):
        """Train on the users of ``X``.

        ``validation`` may be ``(X_foldin, y_targets)`` to early-stop on
        NDCG@100 of those users.
        """
        if self.schema is None:
            raise ValueError("CaDVAE needs a ConceptSchema")
        X = _check_interactions(X)
        if X.shape[1] != self.schema.n_items:
            raise ValueError(f"schema covers {self.schema.n_items} items, X has {X.shape[1]}")
        val = None
        if validation is not None:
            Xv = _check_interactions(validation[0], X.shape[1])
            val = (Xv, _rows(Xv), _rows(validation[1]))
        self.checkpoint_ = fit(X, self.schema, self._config(), val)
        self.model_ = self.checkpoint_.model
        self.history_ = self.checkpoint_.history
        self.n_features_in_ = X.shape[1]
        self.label_mats_ = self.schema.label_matrices()
        return self

    def _run(self, X):
        check_is_fitted(self, "model_")
        X = _check_interactions(X, self.n_features_in_)
        return X, score_users(self.model_, UserFeatures(X, self.schema, self.label_mats_))

    def decision_function(self, X):
        """Decoder logits, one row per user."""
        return self._run(X)[1][0]

    def transform(self, X):
        """Posterior-mean concept representations, flattened to ``k * d`` columns."""
        blocks = self._run(X)[1][1]
        return blocks.reshape(len(blocks), -1)

    def predict(self, X):
        """Top ``top_n`` unseen items per user (``-1`` pads short lists)."""
        X, (scores, _) = self._run(X)
        out = np.full((X.shape[0], self.top_n), -1, dtype=np.int64)
        for u in range(X.shape[0]):
            seen = X.indices[X.indptr[u]:X.indptr[u + 1]]
            rec = M.top_k(scores[u], seen, self.top_n)
            out[u, : len(rec)] = rec
        return out

    def score(self, X, y, sample_weight=None):
        """Mean NDCG@100 of held-out targets ``y`` given fold-in ``X``."""
        X, (scores, _) = self._run(X)
        foldin = [X.indices[X.indptr[u]:X.indptr[u + 1]] for u in range(X.shape[0])]
        return M.evaluate_rankings(scores, foldin, _rows(y), (100,), ()).metrics["ndcg@100"]

    @property
    def adjacency_(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.causal.A.detach().double().numpy()
