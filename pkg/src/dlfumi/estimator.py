"""scikit-learn compatible wrappers around the EM solver."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import core
from .data import MILDataset, make_bags
from .inference import MulticlassModel, class_confidences, code_test_instances, confidences


def check_bags(bags, y=None):
    """Validate a list of 2-D bags plus bag labels and stack them.

    A :class:`MILDataset` is passed through unchanged (``y`` must then be None).
    """
    if isinstance(bags, MILDataset):
        if y is not None:
            raise ValueError("labels are taken from the MILDataset; pass y=None")
        return bags
    if y is None:
        raise ValueError("bag labels y are required")
    arrays = [check_array(b, ensure_2d=True) for b in bags]
    y = np.asarray(y).ravel()
    if len(arrays) != y.size:
        raise ValueError(f"{len(arrays)} bags but {y.size} labels")
    if not arrays:
        raise ValueError("no bags given")
    if len({a.shape[1] for a in arrays}) > 1:
        raise ValueError("bags disagree on feature dimension")
    ids = np.concatenate([np.full(len(a), j) for j, a in enumerate(arrays)])
    return MILDataset(np.vstack(arrays), ids, y.astype(int))


class DLFUMI(TransformerMixin, BaseEstimator):
    """Target detector trained from bag-labeled data.

    Learns ``n_target_atoms`` target atoms and ``n_background_atoms``
    background atoms shared by all instances. After fitting,
    :meth:`decision_function` gives the reconstruction-ratio confidence of
    each instance and :meth:`transform` its code over the full dictionary.

    Parameters
    ----------
    n_target_atoms, n_background_atoms : int
    l1_penalty : float
        Sparsity weight on the codes.
    discrim_penalty : float
        Scale of the adaptive term pushing background atoms away from
        target atoms.
    beta : float
        Scale of the exponential posterior on background residuals.
    psi : float or None
        Weight of positive-bag instances; None balances the instance counts.
    inner_iters : int
        Coding sweeps per EM iteration.
    max_iter : int
        EM iteration cap.
    tol : float
        Relative change of the expected objective that counts as converged.
    init_code_iters : int
        Coding sweeps used to build the starting codes.
    test_l1_penalty : float or None
        Sparsity weight for test-time coding; None reuses ``l1_penalty``.
    test_iters : int
        ISTA iterations for test-time coding.
    random_state : int
    """

    def __init__(self, n_target_atoms=4, n_background_atoms=15, l1_penalty=1e-3,
                 discrim_penalty=0.1, beta=25.0, psi=None, inner_iters=5,
                 max_iter=100, tol=1e-6, init_code_iters=50, test_l1_penalty=None,
                 test_iters=100, random_state=0):
        self.n_target_atoms = n_target_atoms
        self.n_background_atoms = n_background_atoms
        self.l1_penalty = l1_penalty
        self.discrim_penalty = discrim_penalty
        self.beta = beta
        self.psi = psi
        self.inner_iters = inner_iters
        self.max_iter = max_iter
        self.tol = tol
        self.init_code_iters = init_code_iters
        self.test_l1_penalty = test_l1_penalty
        self.test_iters = test_iters
        self.random_state = random_state

    @classmethod
    def from_hyperparams(cls, hp: core.Hyperparams, test_lam=None, test_iters=100):
        return cls(n_target_atoms=hp.T, n_background_atoms=hp.M, l1_penalty=hp.lam,
                   discrim_penalty=hp.Gamma, beta=hp.beta, psi=hp.psi,
                   inner_iters=hp.inner_iters, max_iter=hp.max_em_iters, tol=hp.rel_tol,
                   init_code_iters=hp.init_code_iters, test_l1_penalty=test_lam,
                   test_iters=test_iters, random_state=hp.seed)

    def hyperparams(self) -> core.Hyperparams:
        return core.Hyperparams(
            T=self.n_target_atoms, M=self.n_background_atoms, lam=self.l1_penalty,
            Gamma=self.discrim_penalty, beta=self.beta, psi=self.psi,
            inner_iters=self.inner_iters, max_em_iters=self.max_iter,
            rel_tol=self.tol, init_code_iters=self.init_code_iters,
            seed=0 if self.random_state is None else int(self.random_state))

    def fit(self, bags, y=None):
        """Fit on a sequence of ``(n_i, n_features)`` bags and binary bag labels."""
        dataset = check_bags(bags, y)
        result = core.fit(dataset, self.hyperparams())
        self._set_fitted(result.dictionary)
        self.codes_ = result.codes
        self.posterior_ = result.posterior
        self.trace_ = result.trace
        self.n_iter_ = result.n_iter
        self.converged_ = result.converged
        self.psi_ = result.psi
        return self

    def _set_fitted(self, dictionary: core.Dictionary):
        self.dictionary_ = dictionary
        self.target_atoms_ = dictionary.target
        self.background_atoms_ = dictionary.background
        self.n_features_in_ = dictionary.n_features
        return self

    @property
    def test_lambda_(self):
        return self.l1_penalty if self.test_l1_penalty is None else self.test_l1_penalty

    def _check_X(self, X):
        check_is_fitted(self, "dictionary_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Full-dictionary codes, target block first."""
        X = self._check_X(X)
        return code_test_instances(X, self.dictionary_, self.test_lambda_, self.test_iters)[0]

    def decision_function(self, X):
        """Background-to-full residual ratio; larger means more target-like."""
        X = self._check_X(X)
        return confidences(X, self.dictionary_, self.test_lambda_, self.test_iters)[0]

    def score_instances(self, X):
        """``(confidence, background_residual, full_residual, flagged)`` arrays."""
        X = self._check_X(X)
        return confidences(X, self.dictionary_, self.test_lambda_, self.test_iters)


class DLFUMIClassifier(ClassifierMixin, BaseEstimator):
    """One-vs-rest classifier built from per-class detectors.

    ``fit`` takes an ordinary labeled instance table. For each class it samples
    positive bags (``targets_per_pos_bag`` class members among ``pos_bag_size``
    instances) and negative bags from the other classes, trains a clone of
    ``detector`` on them, and ``predict`` picks the class whose detector is
    most confident.
    """

    def __init__(self, detector=None, pos_bags=50, neg_bags=50, pos_bag_size=4,
                 neg_bag_size=50, targets_per_pos_bag=1, random_state=0, n_jobs=None):
        self.detector = detector
        self.pos_bags = pos_bags
        self.neg_bags = neg_bags
        self.pos_bag_size = pos_bag_size
        self.neg_bag_size = neg_bag_size
        self.targets_per_pos_bag = targets_per_pos_bag
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _fit_one(self, X, y, c, seed):
        ds = make_bags(X, y, c, pos_bags=self.pos_bags, neg_bags=self.neg_bags,
                       bag_size=self.pos_bag_size, neg_bag_size=self.neg_bag_size,
                       targets_per_pos_bag=self.targets_per_pos_bag, seed=seed)
        est = clone(self.detector if self.detector is not None else DLFUMI())
        est.set_params(random_state=seed)
        return est.fit(ds)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        base = 0 if self.random_state is None else int(self.random_state)
        seeds = [base * 1000 + i for i in range(self.classes_.size)]
        jobs = [(c, s) for c, s in zip(self.classes_, seeds)]
        if self.n_jobs in (None, 1):
            self.estimators_ = [self._fit_one(X, y, c, s) for c, s in jobs]
        else:
            from joblib import Parallel, delayed
            self.estimators_ = Parallel(n_jobs=self.n_jobs)(
                delayed(self._fit_one)(X, y, c, s) for c, s in jobs)
        self.n_features_in_ = X.shape[1]
        return self

    def to_model(self) -> MulticlassModel:
        check_is_fitted(self, "estimators_")
        return MulticlassModel(self.classes_, [e.dictionary_ for e in self.estimators_],
                               [e.test_lambda_ for e in self.estimators_])

    def decision_function(self, X):
        """Per-class confidences, shape ``(n_samples, n_classes)``."""
        check_is_fitted(self, "estimators_")
        X = check_array(X)
        iters = self.estimators_[0].test_iters
        return class_confidences(X, self.to_model(), iters)

    def predict(self, X):
        C = self.decision_function(X)
        return self.classes_[np.argmax(C, axis=1)]
