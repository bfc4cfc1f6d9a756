"""Soft-margin SVM trained with simplified SMO, and a one-vs-rest wrapper.

The solver maximizes the dual

    W(a) = sum_i a_i - 1/2 sum_ij a_i a_j y_i y_j K(x_i, x_j)
    s.t. 0 <= a_i <= C,  sum_i a_i y_i = 0

by pairwise coordinate ascent. The first index sweeps over KKT violators;
the second is drawn uniformly from a seeded stream, falling back to Platt's
second-choice scan when the random pair cannot move.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, MissingClass, SingleClassInput
from .hog import FeatureMatrix
from .rng import SplitMix64

KERNELS = ("linear", "rbf")


class NonConvergenceWarning(UserWarning):
    """SMO stopped with KKT violations above tolerance."""


def kernel_matrix(A, B, kernel: str, gamma: float) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    G = A @ B.T
    if kernel == "linear":
        return G
    if kernel == "rbf":
        sq = np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * G
        return np.exp(-gamma * np.maximum(sq, 0.0))
    raise InvalidConfig(f"unknown kernel {kernel!r}")


def kernel(x, z, kind: str, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if kind == "linear":
        return float(x @ z)
    d = x - z
    return float(np.exp(-gamma * (d @ d)))


@dataclass
class BinarySvm:
    support_vectors: np.ndarray
    alphas: np.ndarray
    labels: np.ndarray  # +-1 per support vector
    bias: float
    kernel: str = "rbf"
    gamma: float = 1.0
    C: float = 1.0
    converged: bool = True
    max_kkt_violation: float = 0.0
    objective_trace: list = field(default_factory=list, repr=False)

    @property
    def coef(self) -> np.ndarray:
        return self.alphas * self.labels

    def decision_values(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if len(self.alphas) == 0:
            return np.full(len(X), self.bias)
        if X.shape[1] != self.support_vectors.shape[1]:
            raise DimensionMismatch(
                f"expected {self.support_vectors.shape[1]} features, got {X.shape[1]}"
            )
        K = kernel_matrix(X, self.support_vectors, self.kernel, self.gamma)
        return K @ self.coef + self.bias

    def dual_objective(self) -> float:
        K = kernel_matrix(self.support_vectors, self.support_vectors, self.kernel, self.gamma)
        c = self.coef
        return float(self.alphas.sum() - 0.5 * c @ K @ c)


def svm_decision_value(m: BinarySvm, x) -> float:
    return float(m.decision_values(x)[0])


def kkt_violations(alpha, y, E, C) -> np.ndarray:
    """Per-point KKT violation given errors ``E = f(x) - y``."""
    r = y * E
    return np.where(alpha < C, np.maximum(-r, 0.0), 0.0) + np.where(alpha > 0, np.maximum(r, 0.0), 0.0)


def smo_solve(K: np.ndarray, y: np.ndarray, C: float = 1.0, tol: float = 1e-3,
              max_passes: int = 5, seed: int = 0, max_sweeps: int = 10_000):
    """Simplified SMO on a precomputed kernel matrix.

    Returns ``(alpha, b, converged, max_violation, objective_trace)``; the
    trace holds the dual objective after every accepted pair update.
    """
    n = len(y)
    y = y.astype(np.float64)
    alpha = np.zeros(n)
    b = 0.0
    E = -y.copy()
    diag = np.diag(K).copy()
    rng = SplitMix64(seed)
    step_eps = 1e-2 * tol * min(C, 1.0)
    bound_eps = 1e-12 * C

    def snap(a):
        # rounding must not leave alphas a hair inside the box
        if a <= bound_eps:
            return 0.0
        if a >= C - bound_eps:
            return C
        return a

    state = {"b": 0.0, "W": 0.0}
    trace = [0.0]

    def take_step(i, j):
        b = state["b"]
        yi, Ei, ai = y[i], E[i], alpha[i]
        yj, Ej, aj = y[j], E[j], alpha[j]
        if yi != yj:
            L, H = max(0.0, aj - ai), min(C, C + aj - ai)
        else:
            L, H = max(0.0, ai + aj - C), min(C, ai + aj)
        if L >= H:
            return False
        Kij = K[i, j]
        eta = 2.0 * Kij - diag[i] - diag[j]
        if eta >= 0:
            return False
        aj_new = snap(min(H, max(L, aj - yj * (Ei - Ej) / eta)))
        if abs(aj_new - aj) < step_eps:
            return False
        ai_new = snap(ai + yi * yj * (aj - aj_new))
        dai, daj = ai_new - ai, aj_new - aj
        b1 = b - Ei - yi * dai * diag[i] - yj * daj * Kij
        b2 = b - Ej - yi * dai * Kij - yj * daj * diag[j]
        if 0 < ai_new < C:
            b_new = b1
        elif 0 < aj_new < C:
            b_new = b2
        else:
            b_new = 0.5 * (b1 + b2)
        state["W"] += (-yi * Ei * dai - yj * Ej * daj
                       - 0.5 * (dai * dai * diag[i] + daj * daj * diag[j]
                                + 2.0 * yi * yj * dai * daj * Kij))
        trace.append(state["W"])
        alpha[i], alpha[j] = ai_new, aj_new
        E[:] += (yi * dai) * K[i] + (yj * daj) * K[j] + (b_new - b)
        state["b"] = b_new
        return True

    def fallback(i, tried):
        # Random partner made no progress: Platt's second-choice order, i.e.
        # largest |E_i - E_j| among unbounded alphas, then all unbounded
        # alphas, then every index, each scan starting at a random offset.
        free = np.flatnonzero((alpha > 0) & (alpha < C))
        if len(free):
            j = int(free[np.argmax(np.abs(E[free] - E[i]))])
            if j not in (i, tried) and take_step(i, j):
                return True
            start = rng.below(len(free))
            for j in np.roll(free, -start):
                if j not in (i, tried) and take_step(i, int(j)):
                    return True
        start = rng.below(n)
        for j in range(start, start + n):
            j %= n
            if j not in (i, tried) and take_step(i, j):
                return True
        return False

    passes = sweeps = 0
    while passes < max_passes and sweeps < max_sweeps:
        changed = 0
        for i in range(n):
            r = y[i] * E[i]
            if not ((r < -tol and alpha[i] < C) or (r > tol and alpha[i] > 0)):
                continue
            j = rng.below(n - 1)
            if j >= i:
                j += 1
            if take_step(i, j):
                changed += 1
                continue
            if fallback(i, j):
                changed += 1
        sweeps += 1
        passes = passes + 1 if changed == 0 else 0
    b = state["b"]
    viol = float(kkt_violations(alpha, y, E, C).max(initial=0.0))
    return alpha, b, viol < tol, viol, trace


def smo_train_binary(X, y, kernel: str = "rbf", C: float = 1.0, tol: float = 1e-3,
                     max_passes: int = 5, gamma: float | None = None, seed: int = 0,
                     max_sweeps: int = 10_000, K: np.ndarray | None = None) -> BinarySvm:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if C <= 0 or tol <= 0:
        raise InvalidConfig("C and tol must be positive")
    if kernel not in KERNELS:
        raise InvalidConfig(f"unknown kernel {kernel!r}")
    if not (np.any(y == 1) and np.any(y == -1)) or np.any(np.abs(y) != 1):
        raise SingleClassInput("binary SVM needs labels in {-1, +1} with both present")
    gamma = 1.0 / X.shape[1] if gamma is None else gamma
    if K is None:
        K = kernel_matrix(X, X, kernel, gamma)
    alpha, b, converged, viol, trace = smo_solve(K, y, C, tol, max_passes, seed, max_sweeps)
    if not converged:
        warnings.warn(f"SMO stopped with KKT violation {viol:.3g} > tol {tol:g}", NonConvergenceWarning)
    sv = alpha > 0
    return BinarySvm(X[sv].copy(), alpha[sv], y[sv].astype(np.float64), float(b), kernel, gamma, C,
                     converged, viol, trace)


@dataclass
class MultiSvm:
    machines: list

    def predict_scores(self, X) -> np.ndarray:
        return np.stack([m.decision_values(X) for m in self.machines], axis=1)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_scores(X), axis=1)


def ovr_fit(F: FeatureMatrix, kernel: str = "rbf", C: float = 1.0, gamma: float | None = None,
            tol: float = 1e-3, max_passes: int = 5, seed: int = 0, n_classes: int = 5,
            n_jobs: int = 1, max_sweeps: int = 10_000) -> MultiSvm:
    counts = np.bincount(F.labels, minlength=n_classes)
    if np.any(counts == 0):
        raise MissingClass(f"classes {np.flatnonzero(counts == 0).tolist()} absent from training data")
    gamma = 1.0 / F.cols if gamma is None else gamma
    K = kernel_matrix(F.values, F.values, kernel, gamma)

    def fit_one(c):
        y = np.where(F.labels == c, 1, -1)
        return smo_train_binary(F.values, y, kernel, C, tol, max_passes, gamma,
                                seed=SplitMix64.derived(seed, c).state, max_sweeps=max_sweeps, K=K)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            machines = list(pool.map(fit_one, range(n_classes)))
    else:
        machines = [fit_one(c) for c in range(n_classes)]
    return MultiSvm(machines)


def ovr_predict_scores(m: MultiSvm, x) -> np.ndarray:
    return m.predict_scores(x)
