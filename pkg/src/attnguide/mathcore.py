"""Numerical substrate: softmax, PCA, Adam, a portable RNG and gradient checks.

Everything here works on float64 numpy arrays. Functions are pure except for
``Rng`` (which advances its own state) and ``adam_step`` (which updates the
parameter arrays and the optimizer state it is handed).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from attnguide.errors import InvalidArgumentError, NumericalError

_MASK64 = (1 << 64) - 1


def _check_finite(x, name="input"):
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} contains NaN or Inf")


# ---------------------------------------------------------------------------
# softmax


def softmax_rows(m, temperature=1.0):
    """Row-wise softmax of ``m / temperature`` with max subtraction.

    Works on any array; normalization is over the last axis. Entries equal
    to ``-inf`` (masked positions) come out as exact zeros.
    """
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    m = np.asarray(m, dtype=np.float64)
    z = m / temperature if temperature != 1.0 else m
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def logsumexp_rows(m):
    m = np.asarray(m, dtype=np.float64)
    mx = np.max(m, axis=-1, keepdims=True)
    return (mx + np.log(np.sum(np.exp(m - mx), axis=-1, keepdims=True)))[..., 0]


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAResult:
    projections: np.ndarray
    explained_variance_ratio: list
    components: np.ndarray
    mean: np.ndarray


def pca_fit_transform(data, k):
    """Project ``data`` (n x d) onto its top-``k`` principal axes.

    Components are eigenvectors of the sample covariance (ddof=1), sorted by
    descending eigenvalue. Each component is sign-fixed so that its entry of
    largest magnitude is positive, which makes the output deterministic.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise InvalidArgumentError("PCA input must be a 2-D matrix")
    n, d = data.shape
    if n < 2:
        raise InvalidArgumentError(f"PCA needs at least 2 rows, got {n}")
    if not 1 <= k <= d:
        raise InvalidArgumentError(f"k must be in [1, {d}], got {k}")
    _check_finite(data, "PCA input")

    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    for j in range(d):
        col = evecs[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            evecs[:, j] = -col
    total = evals.sum()
    ratios = (evals[:k] / total) if total > 0 else np.zeros(k)
    comps = evecs[:, :k]
    return PCAResult(
        projections=centered @ comps,
        explained_variance_ratio=[float(r) for r in ratios],
        components=comps,
        mean=mean,
    )


# ---------------------------------------------------------------------------
# finite differences


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not h > 0:
        raise InvalidArgumentError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(a, b, floor=1e-12):
    """``||a - b|| / max(||a||, ||b||)``; 0 when both are below ``floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` and ``grads`` are dicts of arrays with matching keys/shapes.
    The beta/eps defaults are the usual ones; only the learning rate is
    pinned by the training recipe.
    """
    if not lr > 0:
        raise InvalidArgumentError("learning rate must be positive")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise InvalidArgumentError("betas must lie in [0, 1)")
    if set(params) != set(grads):
        raise InvalidArgumentError("params and grads have different keys")
    for name, p in params.items():
        if np.shape(grads[name]) != np.shape(p):
            raise InvalidArgumentError(
                f"shape mismatch for {name}: {np.shape(grads[name])} vs {np.shape(p)}"
            )
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in sorted(params):
        p, g = params[name], grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# RNG


def _splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** seeded through splitmix64.

    Pure integer arithmetic, so the stream for a given seed is the same on
    every platform. Floats use the top 53 bits; normals use Box-Muller.
    """

    def __init__(self, seed):
        seed = int(seed)
        if not 0 <= seed <= _MASK64:
            raise InvalidArgumentError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        sm = seed
        s = []
        for _ in range(4):
            sm, z = _splitmix64(sm)
            s.append(z)
        self._s = s
        self._spare = None

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def integers(self, n):
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise InvalidArgumentError("upper bound must be positive")
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            r = self.next_u64()
            if r <= limit:
                return r % n

    def randint(self, lo, hi):
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.integers(hi - lo + 1)

    def normal(self, size=None, std=1.0):
        if size is None:
            return std * self._gauss()
        count = int(np.prod(size))
        out = np.fromiter((self._gauss() for _ in range(count)), dtype=np.float64, count=count)
        return std * out.reshape(size)

    def _gauss(self):
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def shuffle(self, items):
        items = list(items)
        return [items[i] for i in self.permutation(len(items))]

    def sample(self, n, k):
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if not 0 <= k <= n:
            raise InvalidArgumentError(f"cannot draw {k} items from {n}")
        return self.permutation(n)[:k]

    def choice(self, items):
        return items[self.integers(len(items))]

    def spawn(self, tag):
        """Independent child generator derived from this seed and ``tag``."""
        _, z = _splitmix64((self.seed ^ (int(tag) * 0xD1B54A32D192ED03)) & _MASK64)
        return Rng(z)


# ---------------------------------------------------------------------------
# Student t via the regularized incomplete beta function


def _betacf(a, b, x, max_iter=500, tol=1e-15):
    # modified Lentz continued fraction for I_x(a, b)
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise NumericalError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a, b, x):
    if a <= 0 or b <= 0:
        raise InvalidArgumentError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise InvalidArgumentError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise InvalidArgumentError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t, df):
    tail = 0.5 * student_t_sf_two_sided(t, df)
    return 1.0 - tail if t >= 0 else tail
