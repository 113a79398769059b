"""Kernel Fisher projection, Mahalanobis-cosine scoring and recognition metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import linalg

log = logging.getLogger(__name__)


class KFAError(ValueError):
    pass


def poly_kernel(gram: np.ndarray, k1: float, k2: float) -> np.ndarray:
    """Element-wise ``(gram + k1) ** k2``; negative bases keep their sign."""
    base = np.asarray(gram, dtype=float) + k1
    if float(k2).is_integer():
        return base ** int(k2)
    return np.sign(base) * np.abs(base) ** k2


@dataclass(frozen=True)
class KernelFisher:
    """Fisher directions expressed as dual coefficients over the training set."""

    coef: np.ndarray        # (S, d_p)
    col_mean: np.ndarray    # (S,) column means of the training kernel
    grand_mean: float
    eigenvalues: np.ndarray

    def project(self, cross_kernel: np.ndarray) -> np.ndarray:
        """Project samples given their kernel against the training set, (n, S)."""
        kc = (cross_kernel - cross_kernel.mean(axis=1, keepdims=True)
              - self.col_mean[None, :] + self.grand_mean)
        return kc @ self.coef


def fisher_from_kernel(K: np.ndarray, labels, d_p: int | None = None,
                       ridge: float = 1e-6, rel_tol: float = 1e-10) -> KernelFisher:
    """Kernel Fisher discriminant from a training kernel matrix.

    The doubly-centred kernel is diagonalised; the Fisher problem is solved in
    the resulting kernel-PCA coordinates with a ridge of
    ``ridge * trace(Sw) / S`` on the within-class scatter.
    """
    K = np.asarray(K, dtype=float)
    labels = np.asarray(labels)
    S = len(K)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise KFAError("kernel Fisher analysis needs at least 2 classes")
    col_mean = K.mean(axis=0)
    grand = float(K.mean())
    Kc = K - col_mean[None, :] - col_mean[:, None] + grand
    Kc = 0.5 * (Kc + Kc.T)
    lam, U = linalg.eigh(Kc)
    keep = lam > rel_tol * max(lam.max(), 0.0)
    if not keep.any():
        raise KFAError("centred kernel has no positive eigenvalue; all samples coincide")
    lam, U = lam[keep][::-1], U[:, keep][:, ::-1]
    Y = U * np.sqrt(lam)
    means = np.zeros((len(classes), Y.shape[1]))
    np.add.at(means, inverse, Y)
    means /= counts[:, None]
    within = Y - means[inverse]
    Sw = within.T @ within
    Sb = (means * counts[:, None]).T @ means
    scale = np.trace(Sw)
    if scale <= 0:
        scale = np.trace(Y.T @ Y)
    eps = ridge * scale / S
    try:
        evals, W = linalg.eigh(Sb, Sw + eps * np.eye(len(Sw)))
    except linalg.LinAlgError as exc:
        raise KFAError(f"within-class scatter is singular after conditioning "
                       f"(class sizes {counts.tolist()})") from exc
    limit = min(S - 1, len(classes) - 1, Y.shape[1])
    d_p = limit if d_p is None else min(int(d_p), limit)
    if d_p < 1:
        raise KFAError("projected dimension must be at least 1")
    W = W[:, ::-1][:, :d_p]
    coef = (U / np.sqrt(lam)) @ W
    return KernelFisher(coef, col_mean, grand, evals[::-1][:d_p])


def shrink_covariance(P: np.ndarray, shrinkage: float = 0.05) -> np.ndarray:
    sigma = np.atleast_2d(np.cov(P, rowvar=False))
    sigma = (1 - shrinkage) * sigma + shrinkage * np.diag(np.diag(sigma))
    sigma = 0.5 * (sigma + sigma.T)
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        jitter = 1e-9 * max(np.trace(sigma) / len(sigma), 1e-300)
        sigma = sigma + jitter * np.eye(len(sigma))
    return sigma


@dataclass(frozen=True)
class GalleryModel:
    support: np.ndarray     # training feature matrix
    labels: np.ndarray
    k1: float
    k2: float
    fisher: KernelFisher
    Sigma: np.ndarray
    projected: np.ndarray

    @property
    def d_p(self) -> int:
        return self.fisher.coef.shape[1]


def kfa_fit(gallery: np.ndarray, labels, k1: float = 0.0, k2: float = 2.65,
            d_p: int | None = None, ridge: float = 1e-6, shrinkage: float = 0.05) -> GalleryModel:
    X = np.atleast_2d(np.asarray(gallery, dtype=float))
    if d_p is not None and d_p > len(X) - 1:
        raise KFAError(f"d_p={d_p} exceeds S_g - 1 = {len(X) - 1}")
    K = poly_kernel(X @ X.T, k1, k2)
    fisher = fisher_from_kernel(K, labels, d_p, ridge)
    P = fisher.project(K)
    return GalleryModel(X, np.asarray(labels), float(k1), float(k2), fisher,
                        shrink_covariance(P, shrinkage), P)


def kfa_project(model: GalleryModel, probes: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(probes, dtype=float))
    if X.shape[1] != model.support.shape[1]:
        raise ValueError(f"probe dimension {X.shape[1]} != training dimension {model.support.shape[1]}")
    return model.fisher.project(poly_kernel(X @ model.support.T, model.k1, model.k2))


# ---------------------------------------------------------------- scoring

@njit(cache=True)
def _whiten(X, T):
    n, d = X.shape
    out = np.zeros((n, d))
    for i in range(n):
        for r in range(d):
            acc = 0.0
            for c in range(r + 1):
                acc += T[r, c] * X[i, c]
            out[i, r] = acc
    return out


@njit(cache=True)
def _dot(a, b):
    acc = 0.0
    for k in range(a.shape[0]):
        acc += a[k] * b[k]
    return acc


@njit(cache=True)
def _cosine_scores(Ug, Up):
    ng, npr = Ug.shape[0], Up.shape[0]
    qg = np.empty(ng)
    qp = np.empty(npr)
    for i in range(ng):
        qg[i] = _dot(Ug[i], Ug[i])
    for j in range(npr):
        qp[j] = _dot(Up[j], Up[j])
    D = np.empty((ng, npr))
    for i in range(ng):
        for j in range(npr):
            den = qg[i] * qp[j]
            if den > 0.0:
                D[i, j] = -_dot(Ug[i], Up[j]) / np.sqrt(den)
            else:
                D[i, j] = np.nan
    return D


@dataclass(frozen=True)
class ScoreMatrix:
    D: np.ndarray               # (S_g, S_p); nan where flagged
    gallery_labels: np.ndarray
    probe_labels: np.ndarray

    @property
    def flags(self) -> np.ndarray:
        return np.isnan(self.D)


def mahalanobis_cosine(Xg, Xp, Sigma, gallery_labels=None, probe_labels=None) -> ScoreMatrix:
    """Negative cosine between rows after whitening by ``Sigma``.

    Rows with zero norm give flagged (nan) entries, which never win a ranking.
    """
    Xg = np.ascontiguousarray(np.atleast_2d(Xg), dtype=float)
    Xp = np.ascontiguousarray(np.atleast_2d(Xp), dtype=float)
    L = np.linalg.cholesky(np.asarray(Sigma, dtype=float))
    T = np.ascontiguousarray(linalg.solve_triangular(L, np.eye(len(L)), lower=True))
    D = _cosine_scores(_whiten(Xg, T), _whiten(Xp, T))
    D = np.clip(D, -1.0, 1.0)
    if np.isnan(D).any():
        log.warning("%d score entries flagged (zero-norm rows)", int(np.isnan(D).sum()))
    gl = np.arange(len(Xg)) if gallery_labels is None else np.asarray(gallery_labels)
    pl = np.arange(len(Xp)) if probe_labels is None else np.asarray(probe_labels)
    return ScoreMatrix(D, gl, pl)


# ---------------------------------------------------------------- metrics

@dataclass(frozen=True)
class RankResult:
    cmc: np.ndarray     # cmc[k-1] = rate at rank k
    r1: float
    n_probes: int
    n_excluded: int


def rank_metrics(scores: ScoreMatrix) -> RankResult:
    D = np.where(np.isnan(scores.D), np.inf, scores.D)
    gl, pl = scores.gallery_labels, scores.probe_labels
    present = np.isin(pl, gl)
    excluded = int((~present).sum())
    if excluded:
        log.warning("%d probes have no gallery sample of their subject; excluded", excluded)
    D, pl = D[:, present], pl[present]
    if len(pl) == 0:
        raise ValueError("no probe has a matching gallery label")
    order = np.argsort(D, axis=0, kind="stable")
    hits = gl[order] == pl[None, :]
    first = np.argmax(hits, axis=0)
    cmc = np.cumsum(np.bincount(first, minlength=len(gl))) / len(pl)
    return RankResult(cmc, float(cmc[0]), len(pl), excluded)


@dataclass(frozen=True)
class VerificationResult:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray
    eer: float
    tar_at_far: float
    far_target: float


def verification_metrics(scores: ScoreMatrix, far_target: float = 1e-3) -> VerificationResult:
    """ROC over every observed score (accept when distance <= threshold)."""
    same = scores.gallery_labels[:, None] == scores.probe_labels[None, :]
    ok = ~np.isnan(scores.D)
    genuine = np.sort(scores.D[same & ok])
    impostor = np.sort(scores.D[~same & ok])
    if len(impostor) == 0:
        raise ValueError("no impostor pairs")
    if len(genuine) == 0:
        raise ValueError("no genuine pairs")
    return roc_from_scores(genuine, impostor, far_target)


def roc_from_scores(genuine, impostor, far_target: float = 1e-3) -> VerificationResult:
    genuine, impostor = np.sort(genuine), np.sort(impostor)
    t = np.concatenate([[-np.inf], np.unique(np.concatenate([genuine, impostor]))])
    far = np.searchsorted(impostor, t, side="right") / len(impostor)
    tar = np.searchsorted(genuine, t, side="right") / len(genuine)
    frr = 1.0 - tar
    diff = far - frr
    i = int(np.flatnonzero(diff >= 0)[0])
    if diff[i] == 0 or i == 0:
        eer = float(far[i])
    else:
        f = -diff[i - 1] / (diff[i] - diff[i - 1])
        eer = float(far[i - 1] + f * (far[i] - far[i - 1]))
    below = np.flatnonzero(far <= far_target)
    tar_at = float(tar[below[-1]]) if len(below) else 0.0
    return VerificationResult(far, tar, t, eer, tar_at, far_target)
