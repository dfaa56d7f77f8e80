"""Training loop, evaluation and the experiment drivers (grid, layer and
training-size sweeps).

A run is fully determined by its ``RunConfig``: the data split is seeded by
``data_seed``, initialization and batch order by ``seed``. Wall-clock epoch
times are kept on the report object but serialized separately, so report
JSON is byte-identical across repeated runs.
"""

import copy
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from attnguide import analysis
from attnguide.data import (
    build_vocab, generate_synthetic_nli, generate_synthetic_ranking, load_tsv_pairs,
    read_tsv_rows, split_dataset, subsample, Dataset, _examples_from_rows,
)
from attnguide.encoder import (
    ArchitectureConfig, forward, init_params, load_checkpoint, positive_probability,
)
from attnguide.errors import InvalidArgumentError, NumericalError, ParseError
from attnguide.guiding import (
    GuidingConfig, TARGET_KINDS, build_targets, compute_pmi_table, load_prior_targets,
    loss_and_grads,
)
from attnguide.mathcore import AdamState, Rng, adam_step
from attnguide.metrics import classification_metrics, ranking_metrics

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.1, 0.01, 0.001, 0.0001, 0.0)
SIZE_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class RunConfig:
    task: str = "nli"
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    guiding: GuidingConfig = field(default_factory=GuidingConfig)
    # data: a TSV path, or the synthetic generator when data_path is None
    data_path: str = None
    dev_path: str = None
    test_path: str = None
    prior_path: str = None
    pmi_window: int = 1
    synthetic_n: int = 3000
    synthetic_vocab: int = 40
    synthetic_claims: int = 300
    synthetic_candidates: int = 5
    data_seed: int = 0
    # optimization
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    train_fraction: float = 1.0
    eval_batch_size: int = 256
    out_dir: str = None

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchitectureConfig.from_dict(self.arch)
        if isinstance(self.guiding, dict):
            self.guiding = GuidingConfig.from_dict(self.guiding)
        self.validate()

    def validate(self):
        if self.task not in ("nli", "ranking"):
            raise InvalidArgumentError(f"task must be 'nli' or 'ranking', got {self.task!r}")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not 0 < self.train_fraction <= 1:
            raise InvalidArgumentError("train_fraction must lie in (0, 1]")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidArgumentError("seed must be an unsigned 64-bit integer")
        if self.guiding.kind == "prior-file" and self.guiding.target_weight > 0 and not self.prior_path:
            raise InvalidArgumentError("guide 'prior-file' needs prior_path")

    def to_dict(self):
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        d["guiding"] = self.guiding.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        new.validate()
        return new


@dataclass
class TrainReport:
    config: dict
    arch: dict
    epochs: list
    final: dict
    n_train: int
    train_digest: str
    epoch_seconds: list = field(default_factory=list)
    params: dict = field(default=None, repr=False)
    vocab: list = field(default=None, repr=False)

    def to_dict(self):
        """Deterministic payload (no timings, no tensors)."""
        return dict(config=self.config, arch=self.arch, n_train=self.n_train,
                    train_digest=self.train_digest, epochs=self.epochs, final=self.final)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def timing_dict(self):
        secs = self.epoch_seconds
        return dict(epoch_seconds=secs, mean_epoch_seconds=sum(secs) / len(secs) if secs else None)

    def primary_metric(self, split="dev"):
        m = self.final[split]
        return m["accuracy"] if "accuracy" in m else m["mrr"]


# ---------------------------------------------------------------------------
# data resolution


@dataclass
class RunData:
    train: Dataset
    dev: Dataset
    test: Dataset
    pmi: object = None
    priors: dict = None


def load_data(cfg):
    L = cfg.arch.seq_len
    if cfg.data_path is None:
        if cfg.task == "nli":
            full = generate_synthetic_nli(cfg.synthetic_n, cfg.synthetic_vocab, L, cfg.data_seed)
        else:
            full = generate_synthetic_ranking(cfg.synthetic_claims, cfg.synthetic_candidates,
                                              cfg.data_seed, vocab_size=max(cfg.synthetic_vocab, 24), L=L)
        train, dev, test = split_dataset(full, cfg.data_seed)
    else:
        rows = read_tsv_rows(cfg.data_path, cfg.task)
        if not rows:
            raise ParseError("no examples", cfg.data_path)
        extra = []
        for p in (cfg.dev_path, cfg.test_path):
            if p is not None:
                extra.extend(read_tsv_rows(p, cfg.task))
        vocab = build_vocab(t for r in rows + extra for t in (r[1], r[2]))
        full = Dataset(cfg.task, _examples_from_rows(rows, vocab, L, cfg.task), vocab)
        if cfg.dev_path is None or cfg.test_path is None:
            train, dev, test = split_dataset(full, cfg.data_seed)
            if cfg.dev_path is not None:
                dev = load_tsv_pairs(cfg.dev_path, vocab, L, cfg.task)
            if cfg.test_path is not None:
                test = load_tsv_pairs(cfg.test_path, vocab, L, cfg.task)
        else:
            train = full
            dev = load_tsv_pairs(cfg.dev_path, vocab, L, cfg.task)
            test = load_tsv_pairs(cfg.test_path, vocab, L, cfg.task)
    if cfg.train_fraction < 1:
        train = Dataset(train.task, subsample(train.examples, cfg.train_fraction, cfg.seed), train.vocab)
    data = RunData(train, dev, test)
    kind = cfg.guiding.canonical().kind
    if kind == "pmi":
        corpus = [e.ids[~e.pad_mask] for e in train.examples]
        data.pmi = compute_pmi_table(corpus, cfg.pmi_window, len(train.vocab))
    elif kind == "prior-file":
        data.priors = load_prior_targets(cfg.prior_path, L, [e.example_id for e in train.examples])
    return data


def resolved_arch(cfg, data):
    arch = copy.deepcopy(cfg.arch)
    arch.vocab_size = len(data.train.vocab)
    arch.n_classes = data.train.n_classes
    arch.validate()
    return arch


def _digest(dataset):
    h = hashlib.sha256()
    for e in dataset.examples:
        h.update(e.example_id.encode())
        h.update(b"\0")
    return h.hexdigest()


# ---------------------------------------------------------------------------
# evaluation


def predict(params, arch, dataset, batch_size=256, with_attention=False):
    """Logits for every example (and per-example diversity statistics)."""
    ids, mask, _ = dataset.arrays()
    logits, stats = [], []
    for s in range(0, len(ids), batch_size):
        fp = forward(params, arch, ids[s:s + batch_size], mask[s:s + batch_size])
        logits.append(fp.logits)
        if with_attention:
            stats.extend(analysis.diversity_summary(fp.attn, fp.pad_mask))
    return np.concatenate(logits), stats


def score_dataset(params, arch, dataset, batch_size=256, diagnostics=False):
    logits, stats = predict(params, arch, dataset, batch_size, with_attention=diagnostics)
    labels = np.array([e.label for e in dataset.examples])
    if dataset.task == "nli":
        out = classification_metrics(logits.argmax(axis=1), labels, 3).to_dict()
    else:
        probs = positive_probability(logits, "ranking")
        groups = {}
        for e, p in zip(dataset.examples, probs):
            g = groups.setdefault(e.group_id, ([], []))
            g[0].append(float(p))
            g[1].append(e.label)
        out = ranking_metrics(groups.values()).to_dict()
    if diagnostics:
        div = np.array(stats)
        out["head_diversity"] = float(div[:, 0].mean())
        out["decorrelation"] = float(div[:, 1].mean())
    return out


# ---------------------------------------------------------------------------
# training


def _epoch_record(epoch, sums, n_batches, guiding, dev_metrics):
    task, mdg, pdg, pattern = (s / n_batches for s in sums[:4])
    total = sums[4] / n_batches
    return dict(epoch=epoch, task_loss=task, mdg_loss=mdg, pdg_loss=pdg, pattern_loss=pattern,
                total_loss=total, dev=dev_metrics)


def run_training(cfg, data=None):
    """Train one model; returns a TrainReport (params attached, not serialized)."""
    cfg.validate()
    if data is None:
        data = load_data(cfg)
    arch = resolved_arch(cfg, data)
    guiding = cfg.guiding.canonical()
    params = init_params(arch, cfg.seed)
    state = AdamState()
    order_rng = Rng(cfg.seed).spawn(1)
    ids, mask, labels = data.train.arrays()
    ex_ids = [e.example_id for e in data.train.examples]
    n = len(ids)
    if n == 0:
        raise InvalidArgumentError("empty training set")
    needs_targets = guiding.kind in TARGET_KINDS

    epochs, seconds = [], []
    for epoch in range(1, cfg.epochs + 1):
        perm = np.array(order_rng.permutation(n))
        sums = [0.0] * 5
        n_batches = 0
        t0 = time.perf_counter()
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            b_ids, b_mask = ids[idx], mask[idx]
            targets = None
            if needs_targets:
                targets = build_targets(guiding, b_ids, b_mask, [ex_ids[i] for i in idx],
                                        data.pmi, data.priors)
            parts, grads, _ = loss_and_grads(params, arch, b_ids, b_mask, labels[idx],
                                             cfg.task, guiding, targets)
            if not np.isfinite(parts.total):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {n_batches + 1}")
            adam_step(params, grads, state, lr=cfg.lr)
            for k, v in enumerate((parts.task, parts.mdg, parts.pdg, parts.pattern, parts.total)):
                sums[k] += v
            n_batches += 1
        seconds.append(round(time.perf_counter() - t0, 3))
        dev = score_dataset(params, arch, data.dev, cfg.eval_batch_size)
        epochs.append(_epoch_record(epoch, sums, n_batches, guiding, dev))
        log.info("epoch %d total %.4f dev %s (%.2fs)", epoch, epochs[-1]["total_loss"], dev, seconds[-1])

    final = dict(
        dev=score_dataset(params, arch, data.dev, cfg.eval_batch_size),
        test=score_dataset(params, arch, data.test, cfg.eval_batch_size, diagnostics=True),
    )
    snapshot = cfg.to_dict()
    snapshot["guiding"] = guiding.to_dict()
    snapshot.pop("out_dir")
    return TrainReport(config=snapshot, arch=arch.to_dict(), epochs=epochs, final=final,
                       n_train=n, train_digest=_digest(data.train), epoch_seconds=seconds,
                       params=params, vocab=list(data.train.vocab.tokens))


def _run_cell(args):
    cfg, key = args
    rep = run_training(cfg)
    rep.params = None
    return key, rep


def _run_many(jobs, workers=1):
    """Run (config, key) jobs; results keyed, independent of completion order."""
    if workers <= 1:
        return dict(_run_cell(j) for j in jobs)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(_run_cell, jobs))


# ---------------------------------------------------------------------------
# experiment drivers


@dataclass
class GridResult:
    reports: dict       # (alpha, beta) -> TrainReport
    best: tuple
    table: list         # rows of dicts


def select_best(scores):
    """``scores``: {(alpha, beta): metric}. Highest metric; ties go to the
    smaller alpha + beta, then smaller alpha."""
    return min(scores, key=lambda ab: (-scores[ab], ab[0] + ab[1], ab[0]))


def run_grid(base, alphas=DEFAULT_GRID, betas=DEFAULT_GRID, workers=1):
    alphas, betas = list(alphas), list(betas)
    if not alphas or not betas:
        raise InvalidArgumentError("grid value lists must be non-empty")
    guide = base.guiding.kind if base.guiding.kind in ("mdg+pdg", "mdg", "pdg") else "mdg+pdg"
    jobs = []
    for a in alphas:
        for b in betas:
            g = copy.deepcopy(base.guiding)
            g.kind, g.alpha, g.beta = guide, float(a), float(b)
            jobs.append((base.replace(guiding=g), (float(a), float(b))))
    reports = _run_many(jobs, workers)
    scores = {k: r.primary_metric("dev") for k, r in reports.items()}
    best = select_best(scores)
    table = []
    for (a, b), r in ((k, reports[k]) for k in sorted(reports, key=lambda k: (-k[0], -k[1]))):
        table.append(dict(alpha=a, beta=b, dev=r.primary_metric("dev"), test=r.primary_metric("test"),
                          head_diversity=r.final["test"]["head_diversity"],
                          decorrelation=r.final["test"]["decorrelation"],
                          best=int((a, b) == best)))
    return GridResult(reports=reports, best=best, table=table)


def run_layer_sweep(base, workers=1):
    """One run per single guided layer, then one guiding every layer.
    Keys are the layer index or ``"all"``."""
    n_layers = base.arch.n_layers
    if n_layers < 1:
        raise InvalidArgumentError("need at least one layer")
    jobs = []
    for l in range(n_layers):
        g = copy.deepcopy(base.guiding)
        g.layer_mask = [i == l for i in range(n_layers)]
        jobs.append((base.replace(guiding=g), l))
    g = copy.deepcopy(base.guiding)
    g.layer_mask = None
    jobs.append((base.replace(guiding=g), "all"))
    return _run_many(jobs, workers)


def run_size_sweep(base, fractions=SIZE_FRACTIONS, workers=1):
    """Guided and unguided runs on the same seeded subsample per fraction.
    Keys are ``(fraction, "guided" | "unguided")``."""
    jobs = []
    for f in fractions:
        f = float(f)
        if not 0 < f <= 1:
            raise InvalidArgumentError(f"fraction {f} outside (0, 1]")
        jobs.append((base.replace(train_fraction=f), (f, "guided")))
        jobs.append((base.replace(train_fraction=f, guiding=GuidingConfig(kind="none")), (f, "unguided")))
    return _run_many(jobs, workers)


def evaluate(checkpoint_path, data_path, task, batch_size=256):
    """Score a saved model on a TSV file; returns a metrics dict."""
    params, arch, vocab_tokens, meta = load_checkpoint(checkpoint_path)
    if vocab_tokens is None:
        raise ParseError("checkpoint carries no vocabulary", checkpoint_path)
    want = 3 if task == "nli" else 1
    if arch.n_classes != want:
        raise InvalidArgumentError(
            f"checkpoint has {arch.n_classes} outputs but task {task!r} needs {want}")
    from attnguide.data import Vocabulary
    ds = load_tsv_pairs(data_path, Vocabulary(vocab_tokens), arch.seq_len, task)
    if len(ds) == 0:
        raise ParseError("no examples", data_path)
    return score_dataset(params, arch, ds, batch_size, diagnostics=True)
