"""Scoring new instances against a learned dictionary.

The confidence of an instance is the ratio of its background-only
reconstruction error to its full-dictionary reconstruction error; values well
above one mean the target atoms were needed.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .core import Dictionary, soft_threshold, step_size

RESIDUAL_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectionScore:
    index: int
    confidence: float
    background_residual: float
    full_residual: float
    flagged: bool = False  # both residuals below the floor


@dataclass
class MulticlassModel:
    """One detector dictionary per class, in class order."""

    classes: np.ndarray
    dictionaries: list
    lams: list

    def __post_init__(self):
        self.classes = np.asarray(self.classes)
        if len(self.classes) != len(self.dictionaries) or len(self.lams) != len(self.classes):
            raise ValueError("need one dictionary and one lambda per class")
        if len({D.n_features for D in self.dictionaries}) > 1:
            raise ValueError("class dictionaries disagree on feature dimension")

    @property
    def n_features(self) -> int:
        return self.dictionaries[0].n_features


def ista_lasso(X, D, lam, n_iter, init=None, eta=None):
    """Row-wise ISTA for ``min_a 0.5 ||x - D a||^2 + lam ||a||_1``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A = np.zeros((X.shape[0], D.shape[1])) if init is None else np.array(init, dtype=float)
    if eta is None:
        eta = step_size(Dictionary(D[:, :0], D), positive=False)
    for _ in range(n_iter):
        A = soft_threshold(A + eta * ((X - A @ D.T) @ D), lam * eta)
    return A


def _sq_norms(R):
    return np.einsum("ij,ij->i", R, R)


def code_test_instances(X, dictionary: Dictionary, lam: float, iters: int = 100):
    """Background-only codes and full codes for row-stacked test instances.

    The full code is warm-started from ``[0, background code]``. Rows where
    the full-dictionary iterate ends with a larger residual than its starting
    point keep the starting point, so the full residual never exceeds the
    background one.

    Returns ``(full_codes, background_codes)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != dictionary.n_features:
        raise ValueError(f"instances have {X.shape[1]} features, "
                         f"dictionary expects {dictionary.n_features}")
    T = dictionary.n_target
    A_b = ista_lasso(X, dictionary.background, lam, iters)
    start = np.hstack([np.zeros((X.shape[0], T)), A_b])
    A = ista_lasso(X, dictionary.matrix, lam, iters, init=start)
    r_b = _sq_norms(X - A_b @ dictionary.background.T)
    r_f = _sq_norms(X - A @ dictionary.matrix.T)
    worse = r_f > r_b
    A[worse] = start[worse]
    return A, A_b


def code_test_instance(x, dictionary: Dictionary, lam: float, iters: int = 100):
    A, A_b = code_test_instances(np.asarray(x)[None, :], dictionary, lam, iters)
    return A[0], A_b[0]


def confidences(X, dictionary: Dictionary, lam: float, iters: int = 100):
    """Return ``(c, background_residuals, full_residuals, flagged)`` arrays."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    A, A_b = code_test_instances(X, dictionary, lam, iters)
    r_b = _sq_norms(X - A_b @ dictionary.background.T)
    r_f = _sq_norms(X - A @ dictionary.matrix.T)
    flagged = (r_b < RESIDUAL_FLOOR) & (r_f < RESIDUAL_FLOOR)
    c = np.where(flagged, 1.0, r_b / np.maximum(r_f, RESIDUAL_FLOOR))
    return c, r_b, r_f, flagged


def detect_batch(X, dictionary: Dictionary, lam: float, iters: int = 100) -> list[DetectionScore]:
    c, r_b, r_f, flagged = confidences(X, dictionary, lam, iters)
    return [DetectionScore(i, float(c[i]), float(r_b[i]), float(r_f[i]), bool(flagged[i]))
            for i in range(c.size)]


def detect(x, dictionary: Dictionary, lam: float, iters: int = 100, index: int = 0) -> DetectionScore:
    s = detect_batch(np.asarray(x)[None, :], dictionary, lam, iters)[0]
    return DetectionScore(index, s.confidence, s.background_residual, s.full_residual, s.flagged)


def class_confidences(X, model: MulticlassModel, iters: int = 100) -> np.ndarray:
    """Confidence of every row under every class detector, shape (n, n_classes)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.column_stack([confidences(X, D, lam, iters)[0]
                            for D, lam in zip(model.dictionaries, model.lams)])


def classify_batch(X, model: MulticlassModel, iters: int = 100):
    C = class_confidences(X, model, iters)
    # argmax returns the first maximum, so ties go to the lowest class index
    return model.classes[np.argmax(C, axis=1)], C


def classify(x, model: MulticlassModel, iters: int = 100):
    labels, C = classify_batch(np.asarray(x)[None, :], model, iters)
    return labels[0], C[0]


def reconstruct(code, dictionary: Dictionary, background_only: bool = False):
    """``D @ code``, or ``D_b @ code_b`` for the background-only reconstruction.

    ``code`` may hold a single code or row-stacked codes; with
    ``background_only`` a full-length code or a background-length code is
    accepted.
    """
    code = np.asarray(code, dtype=float)
    if background_only:
        if code.shape[-1] == dictionary.n_target + dictionary.n_background:
            code = code[..., dictionary.n_target:]
        return code @ dictionary.background.T
    return code @ dictionary.matrix.T

