"""EM solver for multiple-instance dictionary learning with a shared background.

Every instance is coded over ``D = [D_t, D_b]`` (target atoms first). Instances
in negative bags only ever use the background block; instances in positive
bags use the target block in proportion to the posterior probability that
they carry target. Codes are stored row-wise, ``codes[i] = [a_t ; a_b]``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.cluster import KMeans

from .data import MILDataset

logger = logging.getLogger(__name__)


class DegenerateAtomWarning(RuntimeWarning):
    """An atom update had a zero denominator; the previous atom was kept."""


class NumericalError(FloatingPointError):
    pass


@dataclass
class Dictionary:
    """Target atoms and background atoms, one atom per column."""

    target: np.ndarray      # (d, T)
    background: np.ndarray  # (d, M)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        self.background = np.asarray(self.background, dtype=float)
        if self.target.ndim != 2 or self.background.ndim != 2:
            raise ValueError("atoms must be 2-D (n_features, n_atoms)")
        if self.target.shape[0] != self.background.shape[0]:
            raise ValueError("target and background atoms differ in dimension")

    @property
    def n_target(self) -> int:
        return self.target.shape[1]

    @property
    def n_background(self) -> int:
        return self.background.shape[1]

    @property
    def n_features(self) -> int:
        return self.target.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.target, self.background])

    def copy(self) -> "Dictionary":
        return Dictionary(self.target.copy(), self.background.copy())


@dataclass
class Hyperparams:
    T: int = 4
    M: int = 15
    lam: float = 1e-3
    Gamma: float = 0.1
    beta: float = 25.0
    psi: Optional[float] = None  # None: n_negative / n_positive instances
    inner_iters: int = 5
    max_em_iters: int = 100
    rel_tol: float = 1e-6
    init_code_iters: int = 50
    seed: int = 0

    def validate(self):
        if self.T < 1 or self.M < 1:
            raise ValueError("T and M must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.Gamma < 0:
            raise ValueError("Gamma must be nonnegative")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.psi is not None and self.psi <= 0:
            raise ValueError("psi must be positive")
        if self.inner_iters < 1 or self.max_em_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.init_code_iters < 0:
            raise ValueError("init_code_iters must be nonnegative")
        return self

    def resolved_psi(self, dataset: MILDataset) -> float:
        if self.psi is not None:
            return float(self.psi)
        n_pos = int(dataset.positive.sum())
        n_neg = dataset.n_instances - n_pos
        if n_pos == 0 or n_neg == 0:
            return 1.0
        return n_neg / n_pos


@dataclass
class PenaltyMatrix:
    """Adaptive discriminative weights together with the atoms they came from.

    ``gamma[k, t]`` scales the inner product of background atom ``k`` with the
    frozen target atom ``t`` stored in ``target_old``.
    """

    gamma: np.ndarray       # (M, T)
    target_old: np.ndarray  # (d, T)

    def value(self, background: np.ndarray) -> float:
        return float(np.sum(self.gamma * (background.T @ self.target_old)))


def instance_weights(dataset: MILDataset, psi: float) -> np.ndarray:
    return np.where(dataset.positive, psi, 1.0)


# --------------------------------------------------------------------------
# small numerical pieces


def soft_threshold(v, tau):
    """Elementwise ``sign(v) * max(|v| - tau, 0)``, the prox of ``tau * |.|_1``."""
    v = np.asarray(v, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("threshold must be nonnegative")
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def largest_eigenvalue(G, tol=1e-6, max_iter=200, seed=0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    if n == 1:
        return float(G[0, 0])
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ G @ v)
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new
        lam = lam_new
    return lam


def step_size(dictionary: Dictionary, positive: bool = True) -> float:
    """ISTA step ``1 / lambda_max(D^T D)``, or of the background Gram for negatives."""
    D = dictionary.matrix if positive else dictionary.background
    lmax = largest_eigenvalue(D.T @ D)
    if lmax <= 0:
        raise NumericalError("dictionary is identically zero")
    return 1.0 / lmax


def compute_penalty(dictionary: Dictionary, Gamma: float) -> PenaltyMatrix:
    """``gamma[k, t] = Gamma * cos(angle(d_k background, d_t target))``."""
    nb = np.linalg.norm(dictionary.background, axis=0)
    nt = np.linalg.norm(dictionary.target, axis=0)
    if np.any(nb == 0) or np.any(nt == 0):
        raise ValueError("cannot form angles with a zero-norm atom")
    cos = (dictionary.background.T @ dictionary.target) / np.outer(nb, nt)
    return PenaltyMatrix(Gamma * cos, dictionary.target.copy())


# --------------------------------------------------------------------------
# E-step


P0_FLOOR = 1e-100


def e_step(dataset: MILDataset, dictionary: Dictionary, codes, beta: float) -> np.ndarray:
    """Posterior ``P(z_i = 1)`` for every instance.

    For positive-bag instances ``P(z_i = 0) = exp(-beta * r_i)`` where ``r_i``
    is the squared residual of the background part of the current code.
    Values of ``P(z_i = 0)`` below ``P0_FLOOR`` are clamped to 0. Negative-bag
    instances get exactly 0.
    """
    T = dictionary.n_target
    resid = dataset.X - codes[:, T:] @ dictionary.background.T
    r = np.einsum("ij,ij->i", resid, resid)
    p0 = np.exp(-beta * r)
    p0[p0 < P0_FLOOR] = 0.0
    return np.where(dataset.positive, 1.0 - p0, 0.0)


# --------------------------------------------------------------------------
# M-step: atoms


def update_target_atom(t: int, dataset: MILDataset, dictionary: Dictionary,
                       codes, posterior) -> np.ndarray:
    """Closed-form minimizer of the expected objective in target atom ``t``.

    Returns the new atom before normalization. With an all-zero denominator the
    current atom is returned unchanged and a ``DegenerateAtomWarning`` issued.
    """
    pos = dataset.positive
    X, A, p1 = dataset.X[pos], codes[pos], posterior[pos]
    a_t = A[:, t]
    denom = np.sum(p1 * a_t ** 2)
    if denom <= 0:
        warnings.warn(f"target atom {t}: no weighted support, keeping previous atom",
                      DegenerateAtomWarning, stacklevel=2)
        return dictionary.target[:, t].copy()
    u = p1 * a_t
    # sum_i u_i (x_i - D a_i + a_it d_t), without forming the residuals
    num = u @ X - dictionary.matrix @ (u @ A) + dictionary.target[:, t] * denom
    return num / denom


def update_background_atom(k: int, dataset: MILDataset, dictionary: Dictionary,
                           codes, posterior, penalty: PenaltyMatrix,
                           psi: float) -> np.ndarray:
    """Closed-form minimizer of the expected objective in background atom ``k``.

    Positive-bag residuals mix the full reconstruction (weight ``P(z=1)``) and
    the background-only one (weight ``P(z=0)``); the discriminative term pulls
    the atom away from the frozen target atoms.
    """
    T = dictionary.n_target
    pos = dataset.positive
    a_k = codes[:, T + k]
    denom = psi * np.sum(a_k[pos] ** 2) + np.sum(a_k[~pos] ** 2)
    if denom <= 0:
        warnings.warn(f"background atom {k}: no weighted support, keeping previous atom",
                      DegenerateAtomWarning, stacklevel=2)
        return dictionary.background[:, k].copy()
    u = np.where(pos, psi, 1.0) * a_k
    # P(z=1) r_full + P(z=0) r_bg = r_bg - P(z=1) D_t a_t, r_bg with atom k removed
    num = (u @ dataset.X
           - dictionary.background @ (u @ codes[:, T:])
           + dictionary.background[:, k] * (u @ a_k)
           - dictionary.target @ ((u * np.where(pos, posterior, 0.0)) @ codes[:, :T])
           - penalty.target_old @ penalty.gamma[k])
    return num / denom


# --------------------------------------------------------------------------
# M-step: codes


def code_gradient_pos(x, dictionary: Dictionary, alpha, p1):
    """Gradient of the smooth part of a positive instance's expected cost.

    ``-[p1 D_t, D_b]^T x + (p1 D^T D + (1 - p1) [0 D_b]^T [0 D_b]) alpha``,
    per unit instance weight. Works on a single code or on row-stacked codes.
    """
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    p1 = np.asarray(p1, dtype=float)[..., None]
    T = dictionary.n_target
    D, Db = dictionary.matrix, dictionary.background
    grad = p1 * ((alpha @ D.T - x) @ D)
    grad[..., T:] += (1.0 - p1) * ((alpha[..., T:] @ Db.T - x) @ Db)
    return grad


def update_codes_pos(x, dictionary: Dictionary, alpha, p1, lam: float, eta: float):
    """One proximal-gradient step on positive-bag codes.

    Target coefficients are shrunk by ``lam * p1 * eta``, background
    coefficients by ``lam * eta``.
    """
    T = dictionary.n_target
    p1 = np.asarray(p1, dtype=float)
    v = np.asarray(alpha, dtype=float) - eta * code_gradient_pos(x, dictionary, alpha, p1)
    out = np.empty_like(v)
    out[..., :T] = soft_threshold(v[..., :T], (lam * eta * p1)[..., None])
    out[..., T:] = soft_threshold(v[..., T:], lam * eta)
    return out


def update_codes_neg(x, dictionary: Dictionary, alpha, lam: float, eta: Optional[float] = None):
    """One ISTA step on negative-bag codes; the target block is pinned to zero."""
    T = dictionary.n_target
    Db = dictionary.background
    if eta is None:
        eta = step_size(dictionary, positive=False)
    x = np.asarray(x, dtype=float)
    a_b = np.asarray(alpha, dtype=float)[..., T:]
    v = a_b + eta * ((x - a_b @ Db.T) @ Db)
    out = np.zeros(np.shape(alpha))
    out[..., T:] = soft_threshold(v, lam * eta)
    return out


def coding_round(dataset: MILDataset, dictionary: Dictionary, codes, posterior,
                 lam: float, eta_pos: float, eta_neg: float):
    """Update all positive-bag codes, then all negative-bag codes (in place)."""
    pos = dataset.positive
    codes[pos] = update_codes_pos(dataset.X[pos], dictionary, codes[pos],
                                  posterior[pos], lam, eta_pos)
    codes[~pos] = update_codes_neg(dataset.X[~pos], dictionary, codes[~pos], lam, eta_neg)
    return codes


# --------------------------------------------------------------------------
# objectives


def objective(dataset: MILDataset, dictionary: Dictionary, codes, z,
              penalty: PenaltyMatrix, lam: float, psi: float) -> float:
    """Complete-data cost for a fixed binary target assignment ``z``."""
    z = np.where(dataset.positive, np.asarray(z, dtype=float), 0.0)
    T = dictionary.n_target
    w = instance_weights(dataset, psi)
    recon = z[:, None] * (codes[:, :T] @ dictionary.target.T) \
        + codes[:, T:] @ dictionary.background.T
    resid = dataset.X - recon
    fit_term = 0.5 * np.sum(w * np.einsum("ij,ij->i", resid, resid))
    l1 = z * np.abs(codes[:, :T]).sum(axis=1) + np.abs(codes[:, T:]).sum(axis=1)
    return float(fit_term + lam * np.sum(w * l1) + penalty.value(dictionary.background))


def instance_costs(dataset: MILDataset, dictionary: Dictionary, codes, lam: float):
    """Per-instance unweighted cost under ``z = 1`` and ``z = 0``."""
    T = dictionary.n_target
    bg = codes[:, T:] @ dictionary.background.T
    r0 = dataset.X - bg
    r1 = r0 - codes[:, :T] @ dictionary.target.T
    l1_b = np.abs(codes[:, T:]).sum(axis=1)
    l1_t = np.abs(codes[:, :T]).sum(axis=1)
    c1 = 0.5 * np.einsum("ij,ij->i", r1, r1) + lam * (l1_t + l1_b)
    c0 = 0.5 * np.einsum("ij,ij->i", r0, r0) + lam * l1_b
    return c1, c0


def expected_objective(dataset: MILDataset, dictionary: Dictionary, codes, posterior,
                       penalty: PenaltyMatrix, lam: float, psi: float) -> float:
    """Expectation of :func:`objective` over independent ``z_i ~ posterior``."""
    c1, c0 = instance_costs(dataset, dictionary, codes, lam)
    p1 = np.where(dataset.positive, posterior, 0.0)
    w = instance_weights(dataset, psi)
    return float(np.sum(w * (p1 * c1 + (1.0 - p1) * c0))
                 + penalty.value(dictionary.background))


# --------------------------------------------------------------------------
# initialization


def _normalize_columns(A):
    n = np.linalg.norm(A, axis=0)
    if np.any(n == 0):
        raise NumericalError("cannot normalize a zero atom")
    return A / n


def init_dictionary(dataset: MILDataset, hp: Hyperparams) -> Dictionary:
    """Target atoms from means of random positive subsets, background from k-means.

    Positive-bag instances are split into ``T`` disjoint random groups of
    near-equal size; k-means++ (50 iterations) runs on negative-bag instances.
    """
    rng = np.random.default_rng(hp.seed)
    Xp = dataset.X[dataset.positive]
    Xn = dataset.X[~dataset.positive]
    if Xp.shape[0] < hp.T:
        raise ValueError(f"T={hp.T} exceeds the {Xp.shape[0]} positive instances")
    groups = np.array_split(rng.permutation(Xp.shape[0]), hp.T)
    target = np.column_stack([Xp[g].mean(axis=0) for g in groups])

    n_distinct = np.unique(Xn, axis=0).shape[0]
    if hp.M > n_distinct:
        raise ValueError(f"M={hp.M} exceeds the {n_distinct} distinct negative instances")
    km = KMeans(n_clusters=hp.M, init="k-means++", n_init=1, max_iter=50,
                random_state=int(rng.integers(2**31 - 1)))
    km.fit(Xn)
    background = km.cluster_centers_.T
    return Dictionary(_normalize_columns(target), _normalize_columns(background))


def init_codes(dataset: MILDataset, dictionary: Dictionary, lam: float, n_iter: int):
    """Starting codes: lasso-by-ISTA over ``D`` for positive-bag instances
    (as if every one were target) and over ``D_b`` for negative-bag ones."""
    codes = np.zeros((dataset.n_instances, dictionary.n_target + dictionary.n_background))
    ones = np.ones(dataset.n_instances)
    eta_p, eta_n = step_size(dictionary, True), step_size(dictionary, False)
    for _ in range(n_iter):
        coding_round(dataset, dictionary, codes, ones, lam, eta_p, eta_n)
    return codes


# --------------------------------------------------------------------------
# EM loop


@dataclass
class TraceRow:
    iteration: int
    expected_objective: float
    max_atom_change: float


@dataclass
class FitResult:
    dictionary: Dictionary
    codes: np.ndarray
    posterior: np.ndarray
    trace: list = field(default_factory=list)
    psi: float = 1.0
    converged: bool = False

    @property
    def n_iter(self) -> int:
        return len(self.trace)


def fit(dataset: MILDataset, hp: Hyperparams, dictionary: Optional[Dictionary] = None,
        callback=None) -> FitResult:
    """Run EM until the expected objective settles.

    Each iteration: posterior update; penalty weights from the atoms as they
    stand; target atoms then background atoms, each normalized right after its
    update; ``inner_iters`` coding rounds. Stops when the relative change of
    the expected objective drops below ``rel_tol`` or after ``max_em_iters``.
    ``callback(iteration, state_dict)`` is invoked after every iteration.
    """
    hp.validate()
    dataset.check_trainable()
    psi = hp.resolved_psi(dataset)
    D = init_dictionary(dataset, hp) if dictionary is None else dictionary.copy()
    codes = init_codes(dataset, D, hp.lam, hp.init_code_iters)
    result = FitResult(D, codes, np.zeros(dataset.n_instances), psi=psi)

    prev = None
    for it in range(1, hp.max_em_iters + 1):
        post = e_step(dataset, D, codes, hp.beta)
        penalty = compute_penalty(D, hp.Gamma)
        old = D.matrix

        for t in range(D.n_target):
            D.target[:, t] = update_target_atom(t, dataset, D, codes, post)
            D.target[:, t] = _normalize_columns(D.target[:, [t]])[:, 0]
        for k in range(D.n_background):
            D.background[:, k] = update_background_atom(k, dataset, D, codes, post, penalty, psi)
            D.background[:, k] = _normalize_columns(D.background[:, [k]])[:, 0]

        eta_p, eta_n = step_size(D, True), step_size(D, False)
        for _ in range(hp.inner_iters):
            coding_round(dataset, D, codes, post, hp.lam, eta_p, eta_n)

        ef = expected_objective(dataset, D, codes, post, penalty, hp.lam, psi)
        if not np.isfinite(ef):
            raise NumericalError(f"expected objective became {ef} at iteration {it}")
        change = float(np.max(np.linalg.norm(D.matrix - old, axis=0)))
        result.trace.append(TraceRow(it, ef, change))
        result.posterior = post
        logger.debug("iter %d  E[F]=%.6g  max atom change=%.3g", it, ef, change)
        if callback is not None:
            callback(it, {"dictionary": D, "codes": codes, "posterior": post,
                          "penalty": penalty, "expected_objective": ef})
        if prev is not None and abs(ef - prev) / max(abs(prev), 1e-12) < hp.rel_tol:
            result.converged = True
            break
        prev = ef

    result.dictionary, result.codes = D, codes
    return result


__all__ = [
    "DegenerateAtomWarning", "NumericalError", "Dictionary", "Hyperparams",
    "PenaltyMatrix", "soft_threshold", "largest_eigenvalue", "step_size",
    "compute_penalty", "e_step", "update_target_atom", "update_background_atom",
    "code_gradient_pos", "update_codes_pos", "update_codes_neg", "coding_round",
    "objective", "expected_objective", "init_dictionary", "init_codes", "fit",
    "FitResult", "TraceRow",
]
