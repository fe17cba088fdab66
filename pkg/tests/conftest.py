"""Shared helpers for the test suite.

Gradient tests use central finite differences with a fixed step. Batches fed
to those tests are rejection-sampled so that no cross-label similarity sits
near the hinge threshold and no row has an ambiguous or tiny nearest
neighbor; both would make the objective non-differentiable at the test point.
"""

import numpy as np

FD_STEP = 1e-6
FD_RTOL = 1e-4
# Keep test points at least this far from hinge kinks and neighbor ties.
SAFE_GAP = 1e-3
# Nearest-neighbor distances below this make log-distance curvature too
# large for a 1e-6 finite-difference step.
MIN_NN_DIST = 5e-2


def unit_rows(rng, n, d):
    """n random rows on the unit sphere in d dimensions."""
    X = rng.standard_normal((n, d))
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    while np.any(norms < 1e-6):  # essentially never; keeps the math exact
        X = rng.standard_normal((n, d))
        norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / norms


def half_labels(n):
    """Two balanced classes: first half 0, second half 1."""
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2 :] = 1
    return labels


def is_safe_embedding(Z, labels, beta, gap=SAFE_GAP, min_nn=MIN_NN_DIST):
    """True when Z is differentiable territory for hinge and entropy terms."""
    S = Z @ Z.T
    diff = labels[:, None] != labels[None, :]
    if np.any(np.abs(S[diff] - beta) <= gap):
        return False
    D2 = np.maximum(2.0 - 2.0 * S, 0.0)
    D = np.sqrt(D2)
    np.fill_diagonal(D, np.inf)
    Dsorted = np.sort(D, axis=1)
    if np.any(Dsorted[:, 0] <= min_nn):
        return False
    # unique nearest neighbor per row, with slack
    if np.any(Dsorted[:, 1] - Dsorted[:, 0] <= gap):
        return False
    return True


def safe_batch(rng, n, d, beta, max_tries=2000):
    """Unit-row batch with labels, safely away from kinks and ties."""
    labels = half_labels(n)
    for _ in range(max_tries):
        Z = unit_rows(rng, n, d)
        if is_safe_embedding(Z, labels, beta):
            return Z, labels
    raise AssertionError(f"no safe batch found for n={n} d={d} beta={beta}")


def central_diff(f, X, step=FD_STEP):
    """Central finite-difference gradient of scalar f at array X."""
    X = np.asarray(X, dtype=np.float64)
    grad = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        Xp = X.copy()
        Xp[idx] += step
        Xm = X.copy()
        Xm[idx] -= step
        grad[idx] = (f(Xp) - f(Xm)) / (2.0 * step)
    return grad


def rel_err(approx, exact):
    """Norm-relative error, guarded against a zero reference."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(np.linalg.norm(exact), 1e-12)
    return np.linalg.norm(approx - exact) / denom
