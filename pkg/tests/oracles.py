"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops and floats, without
calling into the package, so agreement is evidence rather than tautology.
"""

import math

import numpy as np

from attnguide.data import CLS_ID, PAD_ID, SEP_ID
from attnguide.encoder import ArchitectureConfig, init_params


def brute_pdg(M, valid_cols=None):
    """||M^T M - I||_F^2 by a loop over (a, b, i, j): entry (a, b) of M^T M is
    summed over rows i, then squared by a second pass over rows j."""
    M = np.asarray(M, dtype=float)
    n, L = M.shape
    total = 0.0
    for a in range(L):
        for b in range(L):
            target = 1.0 if a == b and (valid_cols is None or valid_cols[a]) else 0.0
            for i in range(n):
                for j in range(n):
                    total += M[i, a] * M[i, b] * M[j, a] * M[j, b]
            c = sum(M[i, a] * M[i, b] for i in range(n))
            total += -2.0 * c * target + target * target
    return total


def brute_mdg(M, tau=1.0):
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    total = 0.0
    for i in range(n):
        logits = [sum(M[j, t] * M[i, t] for t in range(M.shape[1])) / tau for j in range(n)]
        top = max(logits)
        lse = top + math.log(sum(math.exp(x - top) for x in logits))
        total += lse - logits[i]
    return total


def jacobi_eigh(S, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations for a symmetric matrix; eigenvalues descending."""
    A = np.array(S, dtype=float, copy=True)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = sum(A[p, q] ** 2 for p in range(n) for q in range(n) if p != q)
        if off < tol * tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                R = np.eye(n)
                R[p, p] = R[q, q] = c
                R[p, q] = s
                R[q, p] = -s
                A = R.T @ A @ R
                V = V @ R
    vals = np.diag(A)
    order = sorted(range(n), key=lambda i: -vals[i])
    return vals[order], V[:, order]


def brute_pca(X, k):
    """Covariance (explicit double sum, ddof=1) + Jacobi eigenvectors."""
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    mean = [sum(X[r, c] for r in range(n)) / n for c in range(d)]
    C = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            C[a, b] = sum((X[r, a] - mean[a]) * (X[r, b] - mean[b]) for r in range(n)) / (n - 1)
    vals, vecs = jacobi_eigh(C)
    proj = (X - np.array(mean)) @ vecs[:, :k]
    ratio = vals[:k] / vals.sum()
    return proj, ratio


def match_up_to_sign(P, Q, atol):
    """Per-column comparison allowing a sign flip."""
    for c in range(P.shape[1]):
        if not (np.allclose(P[:, c], Q[:, c], atol=atol) or np.allclose(P[:, c], -Q[:, c], atol=atol)):
            return False
    return True


def reference_adam(x0, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a list of floats; returns the trajectory."""
    x = [float(v) for v in x0]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            x[i] = x[i] - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(list(x))
    return traj


def dense_attention(Z, WQ, WK, WV, key_mask=None):
    """softmax(Q K^T / sqrt(d_k)) V with explicit loops; key_mask True = pad."""
    Z = np.asarray(Z, dtype=float)
    L, D = Z.shape
    dk = WQ.shape[1]

    def mat(X, W):
        return [[sum(X[r][c] * W[c][j] for c in range(X.shape[1])) for j in range(W.shape[1])]
                for r in range(X.shape[0])]

    Q, K, V = mat(Z, WQ), mat(Z, WK), mat(Z, WV)
    A = np.zeros((L, L))
    for r in range(L):
        scores = []
        for c in range(L):
            if key_mask is not None and key_mask[c]:
                scores.append(None)
            else:
                scores.append(sum(Q[r][j] * K[c][j] for j in range(dk)) / math.sqrt(dk))
        top = max(s for s in scores if s is not None)
        ex = [0.0 if s is None else math.exp(s - top) for s in scores]
        tot = sum(ex)
        for c in range(L):
            A[r, c] = ex[c] / tot
    O = np.array([[sum(A[r, c] * V[c][j] for c in range(L)) for j in range(dk)] for r in range(L)])
    return A, O


def hand_t(a, b):
    """Paired t statistic from the textbook formula."""
    d = [x - y for x, y in zip(a, b)]
    n = len(d)
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    return mean / math.sqrt(var / n)


# ---------------------------------------------------------------------------
# tiny model used by the gradient certification


def tiny_arch(**kw):
    base = dict(vocab_size=12, n_layers=1, n_heads=2, d_model=8, d_k=4, seq_len=4,
                ffn_hidden=8, n_classes=3, init_std=0.5)
    base.update(kw)
    return ArchitectureConfig(**base)


def tiny_batch(arch, n_classes=3):
    ids = np.array([[CLS_ID, 7, SEP_ID, 9],
                    [CLS_ID, 5, SEP_ID, PAD_ID],
                    [CLS_ID, 11, 6, SEP_ID]])
    pad = ids == PAD_ID
    labels = np.array([0, 2, 1]) if n_classes > 1 else np.array([1, 0, 1])
    return ids[:, :arch.seq_len], pad[:, :arch.seq_len], labels


def tiny_params(arch, seed=3):
    params = init_params(arch, seed)
    rng = np.random.default_rng(seed)
    # non-trivial norm/bias values so every branch of the backward pass is exercised
    for name, p in params.items():
        if name.endswith(("_g",)):
            p[...] = 1.0 + 0.3 * rng.standard_normal(p.shape)
        elif name.endswith(("_b", "b1", "b2")):
            p[...] = 0.2 * rng.standard_normal(p.shape)
    return params


def central_differences(f, x, h=1e-5):
    """Central differences of scalar ``f`` over every entry of array ``x``."""
    x = np.array(x, dtype=float, copy=True)
    out = np.zeros_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return out


def worst_param_gradient_error(params, analytic, loss_of_params, h=1e-5):
    """Max over parameters of ||analytic - numeric|| / max(||.||, ||.||)."""
    worst, where = 0.0, None
    for name in sorted(params):
        orig = params[name]

        def f(x, name=name):
            params[name] = x
            try:
                return loss_of_params()
            finally:
                params[name] = orig

        num = central_differences(f, orig, h)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-12)
        err = float(np.linalg.norm(a - num) / denom)
        if err > worst:
            worst, where = err, name
    return worst, where
