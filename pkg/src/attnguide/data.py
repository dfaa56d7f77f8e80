"""Vocabulary, tokenization, TSV loaders, synthetic tasks and subsampling."""

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from attnguide.errors import InvalidArgumentError, ParseError
from attnguide.mathcore import Rng

PAD, CLS, SEP, UNK, PERIOD = "[PAD]", "[CLS]", "[SEP]", "[UNK]", "."
RESERVED = (PAD, CLS, SEP, UNK, PERIOD)
PAD_ID, CLS_ID, SEP_ID, UNK_ID, PERIOD_ID = range(5)

NLI_LABELS = {"entailment": 0, "contradiction": 1, "neutral": 2}
NLI_NAMES = {v: k for k, v in NLI_LABELS.items()}


class Vocabulary:
    """Token <-> id map with reserved ids 0..4 for [PAD] [CLS] [SEP] [UNK] '.'."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise InvalidArgumentError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise InvalidArgumentError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token):
        return self.index.get(token, UNK_ID)

    def encode(self, words):
        return [self.id(w) for w in words]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


def split_words(text):
    return text.lower().split()


def build_vocab(corpus):
    """Reserved tokens, then corpus tokens by (frequency desc, token asc)."""
    corpus = list(corpus)
    if not corpus:
        raise InvalidArgumentError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text in corpus:
        words = split_words(text) if isinstance(text, str) else [w.lower() for w in text]
        counts.update(w for w in words if w not in RESERVED)
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + ordered)


def tokenize_pair(first, second, vocab, L):
    """``[CLS] a.. [SEP] b.. [SEP] [PAD]..`` with longest-first truncation.

    Returns ``(ids, pad_mask)`` as numpy arrays of length ``L``.
    """
    if L < 4:
        raise InvalidArgumentError("sequence length must be at least 4")
    a = split_words(first) if isinstance(first, str) else list(first)
    b = split_words(second) if isinstance(second, str) else list(second)
    budget = L - 3
    while len(a) + len(b) > budget:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    ids = [CLS_ID] + vocab.encode(a) + [SEP_ID] + vocab.encode(b) + [SEP_ID]
    n = len(ids)
    ids += [PAD_ID] * (L - n)
    mask = np.zeros(L, dtype=bool)
    mask[n:] = True
    return np.array(ids, dtype=np.int64), mask


@dataclass
class Example:
    ids: np.ndarray
    pad_mask: np.ndarray
    label: int
    example_id: str
    group_id: str = None
    text: tuple = field(default=None, repr=False)

    def validate(self, vocab_size, n_classes):
        if self.ids.shape != self.pad_mask.shape:
            raise InvalidArgumentError(f"example {self.example_id}: ids/mask length differ")
        if self.ids.min() < 0 or self.ids.max() >= vocab_size:
            raise InvalidArgumentError(f"example {self.example_id}: token id out of range")
        if not np.array_equal(self.pad_mask, self.ids == PAD_ID):
            raise InvalidArgumentError(f"example {self.example_id}: pad mask disagrees with [PAD] ids")
        if self.pad_mask[0]:
            raise InvalidArgumentError(f"example {self.example_id}: empty sequence")
        if not 0 <= self.label < max(n_classes, 2):
            raise InvalidArgumentError(f"example {self.example_id}: label {self.label} out of range")


@dataclass
class Dataset:
    task: str                 # "nli" or "ranking"
    examples: list
    vocab: Vocabulary

    @property
    def n_classes(self):
        return 3 if self.task == "nli" else 1

    def __len__(self):
        return len(self.examples)

    def arrays(self):
        ids = np.stack([e.ids for e in self.examples])
        mask = np.stack([e.pad_mask for e in self.examples])
        labels = np.array([e.label for e in self.examples], dtype=np.int64)
        return ids, mask, labels

    def subset(self, indices):
        return Dataset(self.task, [self.examples[i] for i in indices], self.vocab)


def _examples_from_rows(rows, vocab, L, task):
    out = []
    for i, (label, first, second, group) in enumerate(rows):
        ids, mask = tokenize_pair(first, second, vocab, L)
        out.append(Example(ids, mask, label, str(i), group, (first, second)))
    return out


def read_tsv_rows(path, task):
    """Parse a TSV file into ``(label, first, second, group_id)`` rows.

    nli:     ``label<TAB>premise<TAB>hypothesis``
    ranking: ``claim_id<TAB>relevance<TAB>claim<TAB>candidate``
    """
    if task not in ("nli", "ranking"):
        raise InvalidArgumentError(f"unknown task {task!r}")
    ncols = 3 if task == "nli" else 4
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != ncols:
                raise ParseError(f"expected {ncols} tab-separated columns, got {len(cols)}", path, lineno)
            if task == "nli":
                label = NLI_LABELS.get(cols[0].strip().lower())
                if label is None:
                    raise ParseError(f"unknown label {cols[0]!r}", path, lineno)
                rows.append((label, cols[1], cols[2], None))
            else:
                try:
                    rel = int(cols[1])
                except ValueError:
                    raise ParseError(f"relevance must be 0 or 1, got {cols[1]!r}", path, lineno) from None
                if rel not in (0, 1):
                    raise ParseError(f"relevance must be 0 or 1, got {rel}", path, lineno)
                rows.append((rel, cols[2], cols[3], cols[0]))
    return rows


def load_tsv_pairs(path, vocab, L, task):
    """Load examples from a TSV file. ``vocab=None`` builds one from the file."""
    rows = read_tsv_rows(path, task)
    if vocab is None:
        vocab = build_vocab(t for r in rows for t in (r[1], r[2]))
    return Dataset(task, _examples_from_rows(rows, vocab, L, task), vocab)


def write_tsv(path, dataset):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in dataset.examples:
            first, second = e.text
            if dataset.task == "nli":
                fh.write(f"{NLI_NAMES[e.label]}\t{first}\t{second}\n")
            else:
                fh.write(f"{e.group_id}\t{e.label}\t{first}\t{second}\n")


# ---------------------------------------------------------------------------
# synthetic tasks


def synthetic_vocab(vocab_size):
    """Base words ``w0..`` and a disjoint antonym block ``x0..`` of equal size."""
    words = [f"w{i}" for i in range(vocab_size)] + [f"x{i}" for i in range(vocab_size)]
    return Vocabulary(list(RESERVED) + words)


def generate_synthetic_nli(n, vocab_size=40, L=32, seed=0, premise_len=(6, 12), hyp_len=(3, 6)):
    """Class-balanced 3-way inference task.

    entailment    hypothesis is a contiguous span of the premise
    contradiction the same, with one word swapped for its antonym (x<k>)
    neutral       an unrelated random word sequence

    Premises and neutral hypotheses use only base words, so an antonym
    signals contradiction, while telling entailment from neutral requires
    matching the hypothesis against the premise.
    """
    if n < 3:
        raise InvalidArgumentError("need at least 3 examples")
    if vocab_size < 2:
        raise InvalidArgumentError("vocab_size must be at least 2")
    max_len = premise_len[1] + hyp_len[1] + 3
    if max_len > L:
        raise InvalidArgumentError(f"L={L} too short for premise/hypothesis lengths (needs {max_len})")
    rng = Rng(seed)
    vocab = synthetic_vocab(vocab_size)
    labels = [i % 3 for i in range(n)]
    labels = rng.shuffle(labels)
    examples = []
    for i, label in enumerate(labels):
        plen = rng.randint(*premise_len)
        premise = [rng.integers(vocab_size) for _ in range(plen)]
        hlen = rng.randint(hyp_len[0], min(hyp_len[1], plen))
        if label == 2:
            hyp = [f"w{rng.integers(vocab_size)}" for _ in range(hlen)]
        else:
            start = rng.integers(plen - hlen + 1)
            hyp = [f"w{k}" for k in premise[start:start + hlen]]
            if label == 1:
                j = rng.integers(hlen)
                hyp[j] = "x" + hyp[j][1:]
        p_text = " ".join(f"w{k}" for k in premise)
        h_text = " ".join(hyp)
        ids, mask = tokenize_pair(p_text, h_text, vocab, L)
        examples.append(Example(ids, mask, label, f"nli-{i}", None, (p_text, h_text)))
    return Dataset("nli", examples, vocab)


def token_overlap(claim_words, candidate_words):
    claim = set(claim_words)
    return len(claim & set(candidate_words)) / len(claim)


def generate_synthetic_ranking(n_claims, candidates_per_claim, seed=0, vocab_size=60, L=32,
                               claim_len=(6, 10), cand_len=(6, 10)):
    """One relevant candidate per claim (>= 50% of the claim's distinct words)
    and ``candidates_per_claim - 1`` distractors (< 20%). Candidate order
    within a claim is shuffled."""
    if candidates_per_claim < 2:
        raise InvalidArgumentError("need at least 2 candidates per claim")
    if n_claims < 1:
        raise InvalidArgumentError("need at least one claim")
    if claim_len[1] + cand_len[1] + 3 > L:
        raise InvalidArgumentError("L too short for claim/candidate lengths")
    if vocab_size < claim_len[1] + cand_len[1]:
        raise InvalidArgumentError("vocab_size too small for the requested lengths")
    rng = Rng(seed)
    vocab = synthetic_vocab(vocab_size)
    examples = []
    for c in range(n_claims):
        clen = rng.randint(*claim_len)
        claim_ids = rng.sample(vocab_size, clen)
        claim = [f"w{k}" for k in claim_ids]
        others = [f"w{k}" for k in range(vocab_size) if k not in set(claim_ids)]
        cands = []
        for j in range(candidates_per_claim):
            length = rng.randint(*cand_len)
            if j == 0:
                keep = math.ceil(0.5 * clen)
                keep = rng.randint(keep, min(clen, length))
            else:
                keep = min(rng.integers(math.ceil(0.2 * clen)), length)  # strictly < 20%
            words = [claim[i] for i in rng.sample(clen, keep)]
            words += [others[i] for i in rng.sample(len(others), length - keep)]
            cands.append((1 if j == 0 else 0, " ".join(rng.shuffle(words))))
        claim_text = " ".join(claim)
        for rel, cand in rng.shuffle(cands):
            ids, mask = tokenize_pair(claim_text, cand, vocab, L)
            examples.append(Example(ids, mask, rel, f"rank-{len(examples)}", f"claim-{c}",
                                    (claim_text, cand)))
    return Dataset("ranking", examples, vocab)


# ---------------------------------------------------------------------------
# splitting and subsampling


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def subsample(examples, fraction, seed):
    """Stratified sample without replacement of ``round(fraction * n)`` items.

    Each label gets its proportional share (largest remainder, ties to the
    smaller label); order of the input is preserved in the output.
    """
    if not 0 < fraction <= 1:
        raise InvalidArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    items = list(examples)
    n = len(items)
    target = _round_half_up(fraction * n)
    if fraction == 1 or target >= n:
        return items
    by_label = {}
    for i, e in enumerate(items):
        by_label.setdefault(getattr(e, "label", None), []).append(i)
    labels = sorted(by_label, key=lambda x: (x is None, x))
    quotas = {lab: fraction * len(by_label[lab]) for lab in labels}
    take = {lab: int(math.floor(q)) for lab, q in quotas.items()}
    short = target - sum(take.values())
    for lab in sorted(labels, key=lambda lab: -(quotas[lab] - take[lab])):
        if short <= 0:
            break
        if take[lab] < len(by_label[lab]):
            take[lab] += 1
            short -= 1
    rng = Rng(seed)
    chosen = []
    for lab in labels:
        idx = by_label[lab]
        chosen.extend(idx[j] for j in rng.sample(len(idx), take[lab]))
    return [items[i] for i in sorted(chosen)]


def split_dataset(dataset, seed, dev_fraction=0.1, test_fraction=0.1):
    """Seeded train/dev/test split. Ranking data is split by claim."""
    rng = Rng(seed)
    if dataset.task == "ranking":
        groups = sorted({e.group_id for e in dataset.examples}, key=lambda g: (len(g), g))
        order = rng.shuffle(groups)
        n = len(order)
        n_test = max(1, _round_half_up(test_fraction * n))
        n_dev = max(1, _round_half_up(dev_fraction * n))
        test_g, dev_g = set(order[:n_test]), set(order[n_test:n_test + n_dev])
        parts = ([], [], [])
        for i, e in enumerate(dataset.examples):
            k = 2 if e.group_id in test_g else 1 if e.group_id in dev_g else 0
            parts[k].append(i)
    else:
        n = len(dataset)
        order = rng.permutation(n)
        n_test = max(1, _round_half_up(test_fraction * n))
        n_dev = max(1, _round_half_up(dev_fraction * n))
        test_i, dev_i = sorted(order[:n_test]), sorted(order[n_test:n_test + n_dev])
        train_i = sorted(order[n_test + n_dev:])
        parts = (train_i, dev_i, test_i)
    return tuple(dataset.subset(p) for p in parts)
