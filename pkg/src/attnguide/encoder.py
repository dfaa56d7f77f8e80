"""A small pre-LN transformer encoder with a [CLS] classifier, in numpy.

Forward and backward are written out by hand so that gradients can flow from
the attention maps themselves (needed by the guiding losses) back into every
weight. Shapes use B = batch, L = sequence length, D = d_model, H = heads.

Layer layout (per layer)::

    U  = LN1(X)
    X  = X + concat_h(softmax(U Wq_h (U Wk_h)^T / sqrt(dk)) U Wv_h) Wo
    X  = X + relu(LN2(X) W1 + b1) W2 + b2

followed by a final LN. The sentence representation is the final hidden
state at position 0 and the logits are ``W relu(h)`` with no bias.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from attnguide.errors import InvalidArgumentError, ParseError
from attnguide.mathcore import Rng, softmax_rows

CHECKPOINT_FORMAT = "attnguide-checkpoint/1"


@dataclass
class ArchitectureConfig:
    vocab_size: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_k: int = 16
    seq_len: int = 32
    ffn_hidden: int = 128
    n_classes: int = 3
    init_std: float = 0.02
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_k",
                     "seq_len", "ffn_hidden", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.d_k * self.n_heads != self.d_model:
            raise InvalidArgumentError(
                f"d_k * n_heads must equal d_model ({self.d_k} * {self.n_heads} != {self.d_model})"
            )
        if not self.init_std > 0:
            raise InvalidArgumentError("init_std must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(arch):
    """Ordered mapping of parameter name -> shape."""
    D, H, dk, F = arch.d_model, arch.n_heads, arch.d_k, arch.ffn_hidden
    shapes = {
        "tok_emb": (arch.vocab_size, D),
        "pos_emb": (arch.seq_len, D),
    }
    for l in range(arch.n_layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1_g": (D,), p + "ln1_b": (D,),
            p + "wq": (H, D, dk), p + "wk": (H, D, dk), p + "wv": (H, D, dk),
            p + "wo": (D, D),
            p + "ln2_g": (D,), p + "ln2_b": (D,),
            p + "w1": (D, F), p + "b1": (F,),
            p + "w2": (F, D), p + "b2": (D,),
        })
    shapes["lnf_g"] = (D,)
    shapes["lnf_b"] = (D,)
    shapes["cls_w"] = (arch.n_classes, D)
    return shapes


def init_params(arch, seed):
    """Gaussian(0, init_std) weights, unit LN gains, zero biases."""
    rng = Rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.endswith("_b") or leaf in ("b1", "b2"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(shape, std=arch.init_std)
    return params


def count_params(arch):
    return sum(int(np.prod(s)) for s in param_shapes(arch).values())


# ---------------------------------------------------------------------------
# building blocks


def attention_head_forward(Z, W_Q, W_K, W_V, key_mask=None):
    """Single attention head on one sequence.

    ``key_mask`` marks padded key positions (True = masked). Masked columns
    get exactly zero attention. Returns ``(A, O)`` with ``A`` L x L.
    """
    Z = np.asarray(Z, dtype=np.float64)
    L = Z.shape[0]
    if W_Q.shape[0] != Z.shape[1] or W_Q.shape != W_K.shape or W_V.shape[0] != Z.shape[1]:
        raise InvalidArgumentError("projection shapes do not match the input")
    if key_mask is None:
        key_mask = np.zeros(L, dtype=bool)
    key_mask = np.asarray(key_mask, dtype=bool)
    if key_mask.all():
        raise InvalidArgumentError("every key position is masked")
    Q, K, V = Z @ W_Q, Z @ W_K, Z @ W_V
    S = Q @ K.T / math.sqrt(W_Q.shape[1])
    S = np.where(key_mask[None, :], -np.inf, S)
    A = softmax_rows(S)
    return A, A @ V


def classify(h, W):
    """Logits ``W relu(h)``; ``h`` may be a vector or a (B, D) batch."""
    h = np.asarray(h, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if h.shape[-1] != W.shape[1]:
        raise InvalidArgumentError(f"classifier expects width {W.shape[1]}, got {h.shape[-1]}")
    return np.maximum(h, 0.0) @ W.T


def _layernorm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardPass:
    h: np.ndarray          # (B, D) final [CLS] states
    logits: np.ndarray     # (B, C)
    attn: np.ndarray       # (B, N_l, N_h, L, L)
    ids: np.ndarray
    pad_mask: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


def _check_batch(arch, ids, pad_mask):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.shape[1] != arch.seq_len:
        raise InvalidArgumentError(f"sequences must have length {arch.seq_len}, got {ids.shape[1]}")
    if ids.min() < 0 or ids.max() >= arch.vocab_size:
        raise InvalidArgumentError(f"token id out of range [0, {arch.vocab_size})")
    if pad_mask is None:
        pad_mask = np.zeros(ids.shape, dtype=bool)
    pad_mask = np.asarray(pad_mask, dtype=bool).reshape(ids.shape)
    if pad_mask.all(axis=1).any():
        raise InvalidArgumentError("a sequence is entirely padding")
    return ids.astype(np.int64), pad_mask


def _qkv_weight(params, p, arch):
    # (D, 3 * H * dk): columns ordered q|k|v, head-major within each block
    D = arch.d_model
    return np.concatenate(
        [params[p + n].transpose(1, 0, 2).reshape(D, -1) for n in ("wq", "wk", "wv")], axis=1)


def _masked_softmax(S, mask_add):
    S += mask_add
    S -= S.max(axis=-1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=-1, keepdims=True)
    return S


def forward(params, arch, ids, pad_mask=None):
    ids, pad_mask = _check_batch(arch, ids, pad_mask)
    B, L = ids.shape
    H, dk, D = arch.n_heads, arch.d_k, arch.d_model
    scale = 1.0 / math.sqrt(dk)
    mask_add = np.where(pad_mask, -np.inf, 0.0)[:, None, None, :]

    X = params["tok_emb"][ids] + params["pos_emb"][None]
    layers = []
    attn = np.empty((B, arch.n_layers, H, L, L))
    for l in range(arch.n_layers):
        p = f"layer{l}."
        U, ln1 = _layernorm(X, params[p + "ln1_g"], params[p + "ln1_b"], arch.ln_eps)
        QKV = U.reshape(B * L, D) @ _qkv_weight(params, p, arch)
        QKV = QKV.reshape(B, L, 3, H, dk).transpose(2, 0, 3, 1, 4)   # (3, B, H, L, dk)
        Q, K, V = QKV[0], QKV[1], QKV[2]
        S = Q @ K.transpose(0, 1, 3, 2)
        S *= scale
        A = _masked_softmax(S, mask_add)
        Ocat = (A @ V).transpose(0, 2, 1, 3).reshape(B * L, D)
        X = X + (Ocat @ params[p + "wo"]).reshape(B, L, D)
        U2, ln2 = _layernorm(X, params[p + "ln2_g"], params[p + "ln2_b"], arch.ln_eps)
        U2 = U2.reshape(B * L, D)
        Hpre = U2 @ params[p + "w1"]
        Hpre += params[p + "b1"]
        Hr = np.maximum(Hpre, 0.0)
        F = Hr @ params[p + "w2"]
        F += params[p + "b2"]
        X = X + F.reshape(B, L, D)
        attn[:, l] = A
        layers.append(dict(U=U, ln1=ln1, Q=Q, K=K, V=V, A=A, Ocat=Ocat,
                           U2=U2, ln2=ln2, Hpre=Hpre, Hr=Hr))
    Hf, lnf = _layernorm(X, params["lnf_g"], params["lnf_b"], arch.ln_eps)
    h = Hf[:, 0]
    logits = classify(h, params["cls_w"])
    return ForwardPass(h=h, logits=logits, attn=attn, ids=ids, pad_mask=pad_mask,
                       cache=dict(layers=layers, lnf=lnf))


def encode(params, arch, ids, pad_mask=None):
    """Return ``(h, attn)``: [CLS] states and all N_l x N_h attention maps."""
    fp = forward(params, arch, ids, pad_mask)
    return fp.h, fp.attn


def backward(params, arch, fp, dlogits, dattn=None):
    """Gradients of a scalar loss given its derivative w.r.t. the logits and,
    optionally, w.r.t. the attention maps (shape of ``fp.attn``)."""
    B, L = fp.ids.shape
    H, dk, D = arch.n_heads, arch.d_k, arch.d_model
    scale = 1.0 / math.sqrt(dk)
    grads = {}

    relu_h = np.maximum(fp.h, 0.0)
    grads["cls_w"] = dlogits.T @ relu_h
    dh = (dlogits @ params["cls_w"]) * (fp.h > 0)
    dHf = np.zeros((B, L, D))
    dHf[:, 0] = dh
    dX, grads["lnf_g"], grads["lnf_b"] = _layernorm_backward(dHf, params["lnf_g"], fp.cache["lnf"])

    for l in reversed(range(arch.n_layers)):
        p = f"layer{l}."
        c = fp.cache["layers"][l]
        # feed-forward sublayer
        dX2 = dX.reshape(B * L, D)
        grads[p + "b2"] = dX2.sum(axis=0)
        grads[p + "w2"] = c["Hr"].T @ dX2
        dHpre = dX2 @ params[p + "w2"].T
        dHpre *= c["Hpre"] > 0
        grads[p + "b1"] = dHpre.sum(axis=0)
        grads[p + "w1"] = c["U2"].T @ dHpre
        dU2 = (dHpre @ params[p + "w1"].T).reshape(B, L, D)
        dxl, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layernorm_backward(dU2, params[p + "ln2_g"], c["ln2"])
        dX = dX + dxl
        # attention sublayer
        dX2 = dX.reshape(B * L, D)
        grads[p + "wo"] = c["Ocat"].T @ dX2
        dOh = (dX2 @ params[p + "wo"].T).reshape(B, L, H, dk).transpose(0, 2, 1, 3)
        A = c["A"]
        dA = dOh @ c["V"].transpose(0, 1, 3, 2)
        if dattn is not None:
            dA += dattn[:, l]
        dV = A.transpose(0, 1, 3, 2) @ dOh
        dS = dA
        dS -= (dA * A).sum(axis=-1, keepdims=True)
        dS *= A
        dS *= scale
        dQ = dS @ c["K"]
        dK = dS.transpose(0, 1, 3, 2) @ c["Q"]
        dQKV = np.stack([dQ, dK, dV]).transpose(1, 3, 0, 2, 4).reshape(B * L, 3 * D)
        U = c["U"].reshape(B * L, D)
        dW = (U.T @ dQKV).reshape(D, 3, H, dk).transpose(1, 2, 0, 3)   # (3, H, D, dk)
        grads[p + "wq"], grads[p + "wk"], grads[p + "wv"] = dW[0], dW[1], dW[2]
        dU = (dQKV @ _qkv_weight(params, p, arch).T).reshape(B, L, D)
        dxl, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layernorm_backward(dU, params[p + "ln1_g"], c["ln1"])
        dX = dX + dxl

    grads["pos_emb"] = dX.sum(axis=0)
    dtok = np.zeros_like(params["tok_emb"])
    np.add.at(dtok, fp.ids.reshape(-1), dX.reshape(B * L, D))
    grads["tok_emb"] = dtok
    return grads


# ---------------------------------------------------------------------------
# task losses

PROB_EPS = 1e-12


def task_loss_multiclass(logits, labels):
    """Mean cross-entropy of softmax(logits); returns (loss, dloss/dlogits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, C = logits.shape
    if labels.shape[0] != n:
        raise InvalidArgumentError("logits and labels disagree on batch size")
    if labels.min() < 0 or labels.max() >= C:
        raise InvalidArgumentError(f"label out of range [0, {C})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].sum() / n
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def task_loss_binary(probs, labels, eps=PROB_EPS):
    """Mean binary cross-entropy; returns (loss, dloss/dprobs).

    Probabilities are clamped to [eps, 1 - eps]; the gradient is zero where
    the clamp is active.
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if probs.shape != labels.shape:
        raise InvalidArgumentError("probabilities and labels disagree on batch size")
    if not np.all((labels == 0) | (labels == 1)):
        raise InvalidArgumentError("binary labels must be 0 or 1")
    n = probs.shape[0]
    p = np.clip(probs, eps, 1.0 - eps)
    loss = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)).sum() / n
    grad = (-(labels / p) + (1.0 - labels) / (1.0 - p)) / n
    grad = np.where((probs < eps) | (probs > 1.0 - eps), 0.0, grad)
    return float(loss), grad


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def task_loss(logits, labels, task):
    """Task objective on raw logits; ``task`` is "nli" (softmax CE) or
    "ranking" (single logit -> sigmoid -> binary CE)."""
    if task == "nli":
        return task_loss_multiclass(logits, labels)
    if task == "ranking":
        z = np.asarray(logits)[:, 0]
        p = sigmoid(z)
        loss, dp = task_loss_binary(p, labels)
        dlogits = np.zeros_like(logits)
        dlogits[:, 0] = dp * p * (1.0 - p)
        return loss, dlogits
    raise InvalidArgumentError(f"unknown task {task!r}")


def positive_probability(logits, task):
    """Probability used to rank candidates (class 1 for softmax heads)."""
    logits = np.asarray(logits, dtype=np.float64)
    if task == "ranking" or logits.shape[1] == 1:
        return sigmoid(logits[:, 0])
    return softmax_rows(logits)[:, 1]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, arch, vocab_tokens=None, meta=None):
    """Write an ``.npz`` container: header JSON plus one array per tensor.

    Layout (format ``attnguide-checkpoint/1``):
      ``__header__``  0-d unicode array holding JSON with keys ``format``,
                      ``arch``, ``vocab`` (token list or null), ``meta``,
                      ``params`` (ordered tensor names)
      ``p:<name>``    float64 tensor for each parameter
    """
    names = list(param_shapes(arch))
    header = dict(format=CHECKPOINT_FORMAT, arch=arch.to_dict(),
                  vocab=list(vocab_tokens) if vocab_tokens is not None else None,
                  meta=meta or {}, params=names)
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    for name in names:
        arrays["p:" + name] = np.asarray(params[name], dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(params, arch, vocab_tokens, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise ParseError(f"unsupported checkpoint format {header.get('format')!r}", path)
            arch = ArchitectureConfig.from_dict(header["arch"])
            params = {name: z["p:" + name].copy() for name in header["params"]}
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"cannot read checkpoint: {exc}", path) from exc
    expected = param_shapes(arch)
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            raise ParseError(f"tensor {name} missing or mis-shaped", path)
    return params, arch, header.get("vocab"), header.get("meta", {})
