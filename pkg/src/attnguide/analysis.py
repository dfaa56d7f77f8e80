"""Head-diversity statistics and CSV exports of attention heatmaps and PCA."""

import csv

import numpy as np

from attnguide.errors import InvalidArgumentError
from attnguide.guiding import AttentionMatrix, build_attention_matrix, pdg_loss
from attnguide.mathcore import pca_fit_transform


def _rows(M):
    return M.M if isinstance(M, AttentionMatrix) else np.asarray(M, dtype=np.float64)


def head_diversity(M):
    """Mean pairwise cosine similarity of the (unit) head vectors; lower is
    more diverse."""
    M = _rows(M)
    n = M.shape[0]
    if n < 2:
        raise InvalidArgumentError("head diversity needs at least 2 heads")
    G = M @ M.T
    iu = np.triu_indices(n, k=1)
    return float(G[iu].mean())


def decorrelation_score(M, valid_cols=None):
    """Same quantity as the pattern-decorrelation loss (shared implementation)."""
    return pdg_loss(_rows(M), valid_cols)[0]


def attention_matrices(attn, pad_mask=None, layer_mask=None):
    """One AttentionMatrix per example from a batch of attention tensors."""
    attn = np.asarray(attn)
    return [build_attention_matrix(attn[b], layer_mask, None if pad_mask is None else pad_mask[b])
            for b in range(attn.shape[0])]


def diversity_summary(attn, pad_mask):
    """Per-example (head_diversity, decorrelation_score) over all heads."""
    out = []
    for b, am in enumerate(attention_matrices(attn, pad_mask)):
        out.append((head_diversity(am), decorrelation_score(am, ~pad_mask[b])))
    return out


def mean_attention_map(attn):
    """Elementwise mean over every layer/head map (and over examples if a
    batch is given)."""
    attn = np.asarray(attn, dtype=np.float64)
    L = attn.shape[-1]
    return attn.reshape(-1, L, L).mean(axis=0)


def _fmt(x):
    return repr(float(x))


def export_heatmap(attn, path, tokens=None):
    """Write the mean attention map as CSV: a header of token strings
    followed by L rows of L values. Returns the matrix written."""
    H = mean_attention_map(attn)
    L = H.shape[0]
    if tokens is None:
        tokens = [str(i) for i in range(L)]
    if len(tokens) != L:
        raise InvalidArgumentError(f"{len(tokens)} token labels for a {L}x{L} map")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(tokens)
        for row in H:
            w.writerow([_fmt(x) for x in row])
    return H


def read_heatmap(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])


def pca_heads(matrices, path=None, sample_ids=None):
    """Stack every sample's head vectors, project to 2-D and write CSV rows
    ``sample_id,layer,head,x,y``. Returns (rows, PCAResult)."""
    matrices = list(matrices)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(matrices))]
    data, meta = [], []
    for sid, am in zip(sample_ids, matrices):
        for (layer, head), row in zip(am.provenance, am.M):
            data.append(row)
            meta.append((sid, layer, head))
    if len(data) < 2:
        raise InvalidArgumentError("PCA of heads needs at least 2 head vectors")
    res = pca_fit_transform(np.array(data), 2)
    rows = [(sid, layer, head, float(x), float(y))
            for (sid, layer, head), (x, y) in zip(meta, res.projections)]
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "layer", "head", "x", "y"])
            for sid, layer, head, x, y in rows:
                w.writerow([sid, layer, head, _fmt(x), _fmt(y)])
    return rows, res
