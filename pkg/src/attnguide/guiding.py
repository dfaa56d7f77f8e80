"""Attention guiding losses and baseline guides.

Each attention map A (L x L) is reduced to the attention every token
*receives* (column sums over real query rows), L2-normalized, and the
selected heads are stacked into M (heads x L). Two auxiliary losses act on M:

* map discrimination (MDG): every head is its own class in a softmax over
  ``m_j . m_i / tau``; minimizing the negative log-likelihood pushes heads
  apart on the unit sphere.
* pattern decorrelation (PDG): ``||M^T M - I||_F^2``, pushing the columns
  (per-position patterns over heads) toward orthonormality.

Baseline guides pull attention rows toward a fixed prior target with a
row-wise KL penalty. Targets come from hand patterns, positive PMI of token
co-occurrence, or a precomputed triplet file.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from attnguide.data import CLS_ID, PERIOD_ID, SEP_ID
from attnguide.encoder import backward, forward, task_loss
from attnguide.errors import InvalidArgumentError, NumericalError, ParseError
from attnguide.mathcore import logsumexp_rows, softmax_rows

GUIDE_KINDS = ("mdg+pdg", "mdg", "pdg", "none",
               "first", "next", "prev", "delim", "period", "pmi", "prior-file")
PATTERN_KINDS = ("first", "next", "prev", "delim", "period")
TARGET_KINDS = PATTERN_KINDS + ("pmi", "prior-file")


@dataclass
class GuidingConfig:
    kind: str = "mdg+pdg"
    alpha: float = 0.01
    beta: float = 0.01
    tau: float = 1.0
    layer_mask: list = None          # None selects every layer
    pattern_weight: float = 0.01
    pdg_normalized: bool = True      # False feeds raw (unnormalized) rows to PDG

    def __post_init__(self):
        if self.kind not in GUIDE_KINDS:
            raise InvalidArgumentError(f"unknown guide kind {self.kind!r}; choose from {GUIDE_KINDS}")
        if self.alpha < 0 or self.beta < 0 or self.pattern_weight < 0:
            raise InvalidArgumentError("guiding weights must be non-negative")
        if not self.tau > 0:
            raise InvalidArgumentError("tau must be positive")
        if self.layer_mask is not None:
            self.layer_mask = [bool(x) for x in self.layer_mask]
            if not any(self.layer_mask) and self.kind != "none":
                raise InvalidArgumentError("layer_mask selects no layer")

    @property
    def mdg_weight(self):
        return self.alpha if self.kind in ("mdg+pdg", "mdg") else 0.0

    @property
    def pdg_weight(self):
        return self.beta if self.kind in ("mdg+pdg", "pdg") else 0.0

    @property
    def target_weight(self):
        return self.pattern_weight if self.kind in TARGET_KINDS else 0.0

    @property
    def active(self):
        return self.mdg_weight > 0 or self.pdg_weight > 0 or self.target_weight > 0

    def canonical(self):
        """Equivalent config with unused fields reset.

        Every setting that adds nothing to the objective (``none``, or
        ``mdg+pdg`` with alpha = beta = 0, ...) maps to the same value, so
        two runs that train identically also record identical configs.
        """
        if not self.active:
            return GuidingConfig(kind="none", alpha=0.0, beta=0.0, tau=1.0,
                                 layer_mask=None, pattern_weight=0.0)
        kind = self.kind
        if kind == "mdg+pdg" and self.alpha == 0:
            kind = "pdg"
        elif kind == "mdg+pdg" and self.beta == 0:
            kind = "mdg"
        uses_mdg = kind in ("mdg+pdg", "mdg")
        uses_pdg = kind in ("mdg+pdg", "pdg")
        return GuidingConfig(
            kind=kind,
            alpha=self.alpha if uses_mdg else 0.0,
            beta=self.beta if uses_pdg else 0.0,
            tau=self.tau if uses_mdg else 1.0,
            layer_mask=None if self.layer_mask is None or all(self.layer_mask) else list(self.layer_mask),
            pattern_weight=self.pattern_weight if kind in TARGET_KINDS else 0.0,
            pdg_normalized=self.pdg_normalized if uses_pdg else True,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown guiding keys: {sorted(unknown)}")
        return cls(**d)


def selected_layers(layer_mask, n_layers):
    if layer_mask is None:
        return list(range(n_layers))
    if len(layer_mask) != n_layers:
        raise InvalidArgumentError(f"layer_mask has {len(layer_mask)} entries for {n_layers} layers")
    return [l for l, on in enumerate(layer_mask) if on]


# ---------------------------------------------------------------------------
# attention vectors and the attention matrix


def reduce_attention_map(A, pad_mask=None):
    """Attention received by each token: column sums over non-pad query rows."""
    A = np.asarray(A, dtype=np.float64)
    if pad_mask is None:
        return A.sum(axis=0)
    q = (~np.asarray(pad_mask, dtype=bool)).astype(np.float64)
    return q @ A


@dataclass
class AttentionMatrix:
    M: np.ndarray                  # (N_s, L), unit-norm rows
    provenance: list               # (layer, head) per row
    raw: np.ndarray = field(default=None, repr=False)


def build_attention_matrix(attn, layer_mask=None, pad_mask=None):
    """Stack reduced, unit-normalized attention vectors (layer-major, head-minor).

    ``attn`` has shape (N_l, N_h, L, L) for one example.
    """
    attn = np.asarray(attn, dtype=np.float64)
    n_layers, n_heads = attn.shape[:2]
    layers = selected_layers(layer_mask, n_layers)
    pm = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)[None]
    M, raw, _ = _batched_matrix(attn[None], layers, pm)
    prov = [(l, h) for l in layers for h in range(n_heads)]
    return AttentionMatrix(M=M[0], provenance=prov, raw=raw[0])


def _batched_matrix(attn, layers, pad_mask):
    """attn (B, N_l, N_h, L, L) -> (M, raw, norms), M of shape (B, N_s, L)."""
    B, _, n_heads, L, _ = attn.shape
    A = attn[:, layers].reshape(B, len(layers) * n_heads, L, L)
    if pad_mask is None:
        raw = A.sum(axis=2)
    else:
        q = (~pad_mask).astype(np.float64)
        raw = np.matmul(q[:, None, None, :], A)[:, :, 0, :]
    norms = np.sqrt((raw * raw).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise NumericalError("attention vector with zero norm")
    return raw / norms, raw, norms


def _matrix_backward(dM, M, norms, layers, pad_mask, attn_shape):
    """Push dL/dM back to dL/dattn (zeros outside the selected layers)."""
    B, n_layers, n_heads, L, _ = attn_shape
    dR = (dM - M * (M * dM).sum(axis=-1, keepdims=True)) / norms
    if pad_mask is None:
        dA = np.broadcast_to(dR[:, :, None, :], (B, dR.shape[1], L, L))
    else:
        q = (~pad_mask).astype(np.float64)
        dA = q[:, None, :, None] * dR[:, :, None, :]
    dattn = np.zeros(attn_shape)
    dattn[:, layers] = dA.reshape(B, len(layers), n_heads, L, L)
    return dattn


# ---------------------------------------------------------------------------
# MDG and PDG


def _as_matrix(M):
    if isinstance(M, AttentionMatrix):
        return M.M
    return np.asarray(M, dtype=np.float64)


def mdg_loss(M, tau=1.0):
    """Map discrimination loss and its gradient w.r.t. M.

    ``-sum_i log( exp(m_i.m_i/tau) / sum_j exp(m_j.m_i/tau) )``. Accepts a
    single (N, L) matrix or a batch (B, N, L); a batch gives per-example
    losses.
    """
    if not tau > 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    M = _as_matrix(M)
    G = (M @ np.swapaxes(M, -1, -2)) / tau
    diag = np.diagonal(G, axis1=-2, axis2=-1)
    loss = (logsumexp_rows(G) - diag).sum(axis=-1)
    D = softmax_rows(G)
    n = M.shape[-2]
    D = D - np.eye(n)
    grad = ((D + np.swapaxes(D, -1, -2)) @ M) / tau
    if np.ndim(loss) == 0:
        return float(loss), grad
    return loss, grad


def pdg_loss(M, valid_cols=None):
    """Pattern decorrelation loss ``||M^T M - I||_F^2`` and its gradient.

    ``valid_cols`` (bool, length L) restricts the identity to non-pad
    columns; pad columns of M are zero so they then contribute nothing.
    Accepts (N, L) or a batch (B, N, L).
    """
    M = _as_matrix(M)
    L = M.shape[-1]
    C = np.swapaxes(M, -1, -2) @ M
    if valid_cols is None:
        eye = np.eye(L)
    else:
        v = np.asarray(valid_cols, dtype=np.float64)
        eye = v[..., :, None] * np.eye(L)
    R = C - eye
    loss = (R * R).sum(axis=(-2, -1))
    grad = 4.0 * (M @ R)
    if np.ndim(loss) == 0:
        return float(loss), grad
    return loss, grad


def total_loss(task, mdg, pdg, alpha, beta):
    return task + alpha * mdg + beta * pdg


# ---------------------------------------------------------------------------
# prior attention targets


def restrict_target(T, pad_mask=None):
    """Zero pad columns and renormalize rows; empty rows become uniform
    over real positions. Pad query rows are also set uniform (they are
    never scored)."""
    T = np.array(T, dtype=np.float64)
    L = T.shape[-1]
    valid = np.ones(L, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    uniform = valid / valid.sum()
    T[:, ~valid] = 0.0
    T[~valid, :] = uniform
    sums = T.sum(axis=1)
    empty = sums <= 0
    T[empty] = uniform
    sums[empty] = 1.0
    return T / sums[:, None]


def special_positions(token_ids, pad_mask=None):
    ids = np.asarray(token_ids)
    keep = np.isin(ids, (CLS_ID, SEP_ID))
    if pad_mask is not None:
        keep &= ~np.asarray(pad_mask, dtype=bool)
    return [int(i) for i in np.flatnonzero(keep)]


def fixed_pattern_target(kind, token_ids, special_positions=None, L=None, pad_mask=None):
    """Row-stochastic target for one of the hand-defined patterns.

    first  : everything attends position 0
    next   : row r attends r+1; the last real row attends itself
    prev   : row r attends r-1; row 0 attends itself
    delim  : uniform over [CLS]/[SEP] positions
    period : uniform over '.' positions, or [CLS] if there is none
    """
    if kind not in PATTERN_KINDS:
        raise InvalidArgumentError(f"unknown pattern {kind!r}; choose from {PATTERN_KINDS}")
    ids = np.asarray(token_ids)
    if L is None:
        L = ids.shape[0]
    valid = np.ones(L, dtype=bool) if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
    n = int(valid.sum())
    T = np.zeros((L, L))
    if kind == "first":
        T[:, 0] = 1.0
    elif kind == "next":
        for r in range(n):
            T[r, min(r + 1, n - 1)] = 1.0
    elif kind == "prev":
        for r in range(n):
            T[r, max(r - 1, 0)] = 1.0
    else:
        if kind == "delim":
            cols = list(special_positions) if special_positions is not None else []
            if not cols:
                cols = [0]
        else:
            cols = [int(i) for i in np.flatnonzero((ids[:L] == PERIOD_ID) & valid)] or [0]
        T[:, cols] = 1.0 / len(cols)
    return restrict_target(T, None if pad_mask is None else pad_mask)


def _check_target_rows(T, pad_mask):
    valid = ~pad_mask
    if np.any(T < 0):
        raise InvalidArgumentError("target has negative entries")
    sums = (T * valid[:, None, :]).sum(axis=-1)
    bad = np.abs(sums - 1.0) > 1e-9
    if np.any(bad & valid):
        raise InvalidArgumentError("target row is not a probability distribution over real positions")


def pattern_guiding_loss(attn, targets, layer_mask=None, pad_mask=None):
    """Mean row-wise KL(target || attention) over selected heads and real rows.

    ``attn`` (B, N_l, N_h, L, L) or (N_l, N_h, L, L); ``targets`` (B, L, L)
    or (L, L). Returns (batch-mean loss, dL/dattn).
    """
    attn = np.asarray(attn, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    single = attn.ndim == 4
    if single:
        attn, targets = attn[None], targets[None]
        pad_mask = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)[None]
    B, n_layers, n_heads, L, _ = attn.shape
    if targets.shape != (B, L, L):
        raise InvalidArgumentError(f"target shape {targets.shape} does not match attention {(B, L, L)}")
    pad_mask = np.zeros((B, L), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    _check_target_rows(targets, pad_mask)
    layers = selected_layers(layer_mask, n_layers)
    A = attn[:, layers]                                     # (B, l, H, L, L)
    T = targets[:, None, None]
    qv = (~pad_mask).astype(np.float64)[:, None, None, :, None]
    pos = T > 0
    if np.any(pos & (A <= 0) & (qv > 0)):
        raise NumericalError("target puts mass where attention is exactly zero")
    safe_A = np.where(pos, A, 1.0)
    safe_T = np.where(pos, T, 1.0)
    kl_terms = np.where(pos, T * (np.log(safe_T) - np.log(safe_A)), 0.0) * qv
    counts = len(layers) * n_heads * (~pad_mask).sum(axis=1)    # per example
    per_example = kl_terms.sum(axis=(1, 2, 3, 4)) / counts
    loss = float(per_example.mean())
    dA = -np.where(pos, T / safe_A, 0.0) * qv / (counts[:, None, None, None, None] * B)
    dattn = np.zeros_like(attn)
    dattn[:, layers] = dA
    return loss, (dattn[0] if single else dattn)


# ---------------------------------------------------------------------------
# PMI


@dataclass
class PMITable:
    scores: np.ndarray   # (V, V), symmetric, non-negative
    window: int

    def score(self, x, y):
        return float(self.scores[x, y])


def compute_pmi_table(corpus, window=1, vocab_size=None):
    """Positive PMI from symmetric within-window co-occurrence counts.

    ``p(x, y)`` counts ordered pairs at distance 1..window (both directions);
    ``p(x)`` is the unigram frequency. Negative PMI is clamped to 0.
    """
    if window < 1:
        raise InvalidArgumentError("window must be at least 1")
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus if len(s) > 0]
    if not seqs:
        raise InvalidArgumentError("PMI corpus is empty")
    V = vocab_size if vocab_size is not None else int(max(s.max() for s in seqs)) + 1
    uni = np.zeros(V)
    pair = np.zeros((V, V))
    for s in seqs:
        np.add.at(uni, s, 1.0)
        for d in range(1, window + 1):
            if len(s) > d:
                np.add.at(pair, (s[:-d], s[d:]), 1.0)
                np.add.at(pair, (s[d:], s[:-d]), 1.0)
    total_pairs = pair.sum()
    if total_pairs == 0:
        return PMITable(scores=np.zeros((V, V)), window=window)
    p_xy = pair / total_pairs
    p_x = uni / uni.sum()
    denom = np.outer(p_x, p_x)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.where(pair > 0, np.log(p_xy / np.where(denom > 0, denom, 1.0)), 0.0)
    return PMITable(scores=np.maximum(pmi, 0.0), window=window)


def pmi_target(token_ids, table, pad_mask=None):
    ids = np.asarray(token_ids, dtype=np.int64)
    scores = table.scores if isinstance(table, PMITable) else np.asarray(table)
    T = scores[ids[:, None], ids[None, :]]
    return restrict_target(T, pad_mask)


# ---------------------------------------------------------------------------
# prior-target files


def load_prior_targets(path, L, example_ids=None):
    """Read ``example_id<TAB>row<TAB>col<TAB>weight`` triplets.

    A line holding only an example id declares that example with no
    triplets. Rows without triplets become uniform. Returns a dict
    example_id -> (L, L) row-normalized matrix.
    """
    raw = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            ex = cols[0]
            if len(cols) == 1:
                raw.setdefault(ex, np.zeros((L, L)))
                continue
            if len(cols) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(cols)}", path, lineno)
            try:
                r, c, w = int(cols[1]), int(cols[2]), float(cols[3])
            except ValueError as exc:
                raise ParseError(f"bad number: {exc}", path, lineno) from None
            if not (0 <= r < L and 0 <= c < L):
                raise ParseError(f"index ({r}, {c}) outside [0, {L})", path, lineno)
            if not (w >= 0 and math.isfinite(w)):
                raise ParseError(f"weight must be a non-negative real, got {cols[3]}", path, lineno)
            raw.setdefault(ex, np.zeros((L, L)))[r, c] += w
    if example_ids is not None:
        missing = [e for e in example_ids if e not in raw]
        if missing:
            raise ParseError(f"no prior targets for example {missing[0]!r} "
                             f"({len(missing)} missing)", path)
    return {ex: restrict_target(T) for ex, T in raw.items()}


def write_prior_targets(path, targets):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# example_id\trow\tcol\tweight\n")
        for ex, T in targets.items():
            rows, cols = np.nonzero(T)
            if rows.size == 0:
                fh.write(f"{ex}\n")
            for r, c in zip(rows, cols):
                fh.write(f"{ex}\t{r}\t{c}\t{float(T[r, c])!r}\n")


def build_targets(guiding, ids, pad_mask, example_ids=None, pmi=None, priors=None):
    """(B, L, L) prior targets for a batch under a baseline guide."""
    B, L = ids.shape
    out = np.empty((B, L, L))
    for b in range(B):
        pm = pad_mask[b]
        if guiding.kind in PATTERN_KINDS:
            out[b] = fixed_pattern_target(guiding.kind, ids[b], special_positions(ids[b], pm), L, pm)
        elif guiding.kind == "pmi":
            out[b] = pmi_target(ids[b], pmi, pm)
        elif guiding.kind == "prior-file":
            out[b] = restrict_target(priors[example_ids[b]], pm)
        else:
            raise InvalidArgumentError(f"guide {guiding.kind!r} has no prior target")
    return out


# ---------------------------------------------------------------------------
# combined objective


@dataclass
class LossBreakdown:
    task: float
    mdg: float = 0.0
    pdg: float = 0.0
    pattern: float = 0.0
    total: float = 0.0


def guiding_terms(attn, pad_mask, guiding, targets=None, need_grad=True):
    """Batch-mean guiding losses and dL/dattn for the weighted sum.

    Returns ``(mdg, pdg, pattern, dattn)``; inactive terms are 0 and
    ``dattn`` is None when nothing is active.
    """
    if not guiding.active:
        return 0.0, 0.0, 0.0, None
    B, n_layers = attn.shape[:2]
    layers = selected_layers(guiding.layer_mask, n_layers)
    mdg = pdg = pattern = 0.0
    dattn = None
    if guiding.mdg_weight > 0 or guiding.pdg_weight > 0:
        M, raw, norms = _batched_matrix(attn, layers, pad_mask)
        dM = np.zeros_like(M)
        dRaw = None
        if guiding.mdg_weight > 0:
            losses, g = mdg_loss(M, guiding.tau)
            mdg = float(losses.mean())
            dM += (guiding.mdg_weight / B) * g
        if guiding.pdg_weight > 0:
            P = M if guiding.pdg_normalized else raw
            losses, g = pdg_loss(P, ~pad_mask)
            pdg = float(losses.mean())
            if guiding.pdg_normalized:
                dM += (guiding.pdg_weight / B) * g
            else:
                dRaw = (guiding.pdg_weight / B) * g
        if need_grad:
            dattn = _matrix_backward(dM, M, norms, layers, pad_mask, attn.shape)
            if dRaw is not None:
                q = (~pad_mask).astype(np.float64)
                dA = q[:, None, :, None] * dRaw[:, :, None, :]
                dattn[:, layers] += dA.reshape(B, len(layers), attn.shape[2], *attn.shape[3:])
    if guiding.target_weight > 0:
        if targets is None:
            raise InvalidArgumentError(f"guide {guiding.kind!r} needs prior targets")
        pattern, dp = pattern_guiding_loss(attn, targets, guiding.layer_mask, pad_mask)
        if need_grad:
            dp = guiding.target_weight * dp
            dattn = dp if dattn is None else dattn + dp
    return mdg, pdg, pattern, dattn


def loss_and_grads(params, arch, ids, pad_mask, labels, task, guiding, targets=None, need_grad=True):
    """Forward pass, total objective and (optionally) all parameter gradients.

    total = task + alpha * mdg + beta * pdg (+ pattern_weight * KL for the
    baseline guides), with guiding terms averaged over the batch.
    """
    fp = forward(params, arch, ids, pad_mask)
    t, dlogits = task_loss(fp.logits, labels, task)
    mdg, pdg, pattern, dattn = guiding_terms(fp.attn, fp.pad_mask, guiding, targets, need_grad)
    total = total_loss(t, mdg, pdg, guiding.mdg_weight, guiding.pdg_weight)
    if guiding.target_weight > 0:
        total = total + guiding.target_weight * pattern
    parts = LossBreakdown(task=t, mdg=mdg, pdg=pdg, pattern=pattern, total=total)
    grads = backward(params, arch, fp, dlogits, dattn) if need_grad else None
    return parts, grads, fp
