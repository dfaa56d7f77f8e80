"""Command-line entry point: ``attnguide <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 numerical failure.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from attnguide import analysis, harness
from attnguide.data import generate_synthetic_nli, generate_synthetic_ranking, split_dataset, write_tsv
from attnguide.encoder import ArchitectureConfig, forward, load_checkpoint, save_checkpoint
from attnguide.errors import InvalidArgumentError, NumericalError, ParseError
from attnguide.guiding import GUIDE_KINDS

log = logging.getLogger("attnguide")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_layers(text):
    """``all`` or a bit string such as ``10`` / ``1,0``."""
    if text is None or text == "all":
        return None
    bits = text.replace(",", "")
    if not bits or set(bits) - {"0", "1"}:
        raise InvalidArgumentError(f"--layers expects 'all' or a 0/1 mask, got {text!r}")
    return [b == "1" for b in bits]


def parse_floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InvalidArgumentError(f"expected comma-separated numbers, got {text!r}") from None


def build_config(args):
    raw = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", args.config) from None
        if not isinstance(raw, dict):
            raise ParseError("config must be a JSON object", args.config)
    guiding = dict(raw.pop("guiding", {}) or {})
    for flag, key in (("alpha", "alpha"), ("beta", "beta"), ("tau", "tau"), ("guide", "kind")):
        val = getattr(args, flag, None)
        if val is not None:
            guiding[key] = val
    if getattr(args, "layers", None) is not None:
        guiding["layer_mask"] = parse_layers(args.layers)
    raw["guiding"] = guiding
    for flag, key in (("seed", "seed"), ("data", "data_path"), ("fraction", "train_fraction"),
                      ("epochs", "epochs"), ("task", "task")):
        val = getattr(args, flag, None)
        if val is not None:
            raw[key] = val
    if getattr(args, "out", None):
        raw["out_dir"] = args.out
    return harness.RunConfig.from_dict(raw)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _save_report(out, rep, stem="report"):
    with open(os.path.join(out, f"{stem}.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rep.to_json())
    _write_json(os.path.join(out, f"{stem}.timing.json"), rep.timing_dict())


def _plots(args):
    if args.no_plots:
        return None
    from attnguide import plotting
    return plotting


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    cfg = build_config(args)
    out = _out_dir(args)
    rep = harness.run_training(cfg)
    _save_report(out, rep)
    save_checkpoint(os.path.join(out, "checkpoint.npz"), rep.params,
                    ArchitectureConfig.from_dict(rep.arch), rep.vocab,
                    meta=dict(task=cfg.task))
    metric = "accuracy" if cfg.task == "nli" else "mrr"
    rows = [(e["epoch"], e["task_loss"], e["mdg_loss"], e["pdg_loss"], e["pattern_loss"],
             e["total_loss"], e["dev"][metric], s)
            for e, s in zip(rep.epochs, rep.epoch_seconds)]
    _write_csv(os.path.join(out, "epochs.csv"),
               ["epoch", "task_loss", "mdg_loss", "pdg_loss", "pattern_loss", "total_loss",
                f"dev_{metric}", "seconds"], rows)
    plt = _plots(args)
    if plt:
        xs = [r[0] for r in rows]
        plt.line_plot(xs, {"total": [r[5] for r in rows], "task": [r[1] for r in rows]},
                      os.path.join(out, "loss.png"), "epoch", "loss")
    print(json.dumps(rep.final, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args):
    if not args.checkpoint or not args.data:
        raise InvalidArgumentError("evaluate needs --checkpoint and --data")
    _, _, _, meta = load_checkpoint(args.checkpoint)
    task = args.task or meta.get("task", "nli")
    metrics = harness.evaluate(args.checkpoint, args.data, task)
    if args.out:
        _write_json(os.path.join(_out_dir(args), "metrics.json"), metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_grid(args):
    cfg = build_config(args)
    out = _out_dir(args)
    alphas = parse_floats(args.alphas) if args.alphas else list(harness.DEFAULT_GRID)
    betas = parse_floats(args.betas) if args.betas else list(harness.DEFAULT_GRID)
    res = harness.run_grid(cfg, alphas, betas, workers=args.workers)
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    for (a, b), rep in sorted(res.reports.items()):
        _save_report(os.path.join(out, "reports"), rep, f"alpha={a:g}_beta={b:g}")
    cols = ["alpha", "beta", "dev", "test", "head_diversity", "decorrelation", "best"]
    _write_csv(os.path.join(out, "grid.csv"), cols, [[r[c] for c in cols] for r in res.table])
    _write_json(os.path.join(out, "best.json"), dict(alpha=res.best[0], beta=res.best[1],
                                                     dev=res.reports[res.best].primary_metric("dev")))
    plt = _plots(args)
    if plt:
        vals = [[res.reports[(float(a), float(b))].primary_metric("dev") for b in betas] for a in alphas]
        plt.grid_heatmap(alphas, betas, vals, os.path.join(out, "grid.png"))
    print(json.dumps(dict(best_alpha=res.best[0], best_beta=res.best[1])))
    return EXIT_OK


def cmd_layer_sweep(args):
    cfg = build_config(args)
    out = _out_dir(args)
    reps = harness.run_layer_sweep(cfg, workers=args.workers)
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    rows = []
    for key in list(range(cfg.arch.n_layers)) + ["all"]:
        rep = reps[key]
        _save_report(os.path.join(out, "reports"), rep, f"layer-{key}")
        mask = rep.config["guiding"]["layer_mask"]
        mask_text = "all" if mask is None else "".join("1" if m else "0" for m in mask)
        rows.append([key, mask_text, rep.primary_metric("dev"), rep.primary_metric("test"),
                     rep.final["test"]["head_diversity"], rep.final["test"]["decorrelation"]])
    _write_csv(os.path.join(out, "layer_sweep.csv"),
               ["layer", "layer_mask", "dev", "test", "head_diversity", "decorrelation"], rows)
    plt = _plots(args)
    if plt:
        plt.bar_plot([str(r[0]) for r in rows], [r[3] for r in rows],
                     os.path.join(out, "layer_sweep.png"), "test metric")
    return EXIT_OK


def cmd_size_sweep(args):
    cfg = build_config(args)
    out = _out_dir(args)
    fractions = parse_floats(args.fractions) if args.fractions else list(harness.SIZE_FRACTIONS)
    reps = harness.run_size_sweep(cfg, fractions, workers=args.workers)
    os.makedirs(os.path.join(out, "reports"), exist_ok=True)
    rows = []
    for f in fractions:
        for arm in ("guided", "unguided"):
            rep = reps[(float(f), arm)]
            _save_report(os.path.join(out, "reports"), rep, f"fraction={f:g}_{arm}")
            rows.append([f, arm, rep.n_train, rep.train_digest, rep.primary_metric("dev"),
                         rep.primary_metric("test")])
    _write_csv(os.path.join(out, "size_sweep.csv"),
               ["fraction", "arm", "n_train", "train_digest", "dev", "test"], rows)
    plt = _plots(args)
    if plt:
        series = {arm: [r[5] for r in rows if r[1] == arm] for arm in ("guided", "unguided")}
        plt.line_plot(fractions, series, os.path.join(out, "size_sweep.png"),
                      "training fraction", "test metric")
    return EXIT_OK


def cmd_analyze(args):
    if not args.checkpoint:
        raise InvalidArgumentError("analyze needs --checkpoint")
    out = _out_dir(args)
    params, arch, vocab_tokens, meta = load_checkpoint(args.checkpoint)
    task = args.task or meta.get("task", "nli")
    from attnguide.data import Vocabulary, load_tsv_pairs
    if args.data:
        ds = load_tsv_pairs(args.data, Vocabulary(vocab_tokens), arch.seq_len, task)
    else:
        cfg = build_config(args).replace(task=task, arch=arch)
        ds = harness.load_data(cfg).test
    n = min(args.samples, len(ds))
    if n < 1:
        raise ParseError("no examples to analyze", args.data)
    sample = ds.subset(range(n))
    ids, mask, _ = sample.arrays()
    fp = forward(params, arch, ids, mask)
    vocab = Vocabulary(vocab_tokens)
    tokens = vocab.decode(ids[0])
    heat = analysis.export_heatmap(fp.attn[0], os.path.join(out, "heatmap.csv"), tokens)
    mats = analysis.attention_matrices(fp.attn, fp.pad_mask)
    sids = [e.example_id for e in sample.examples]
    rows, _ = analysis.pca_heads(mats, os.path.join(out, "pca.csv"), sids)
    div_rows = [[sid, repr(analysis.head_diversity(m)), repr(analysis.decorrelation_score(m, ~fp.pad_mask[i]))]
                for i, (sid, m) in enumerate(zip(sids, mats))]
    _write_csv(os.path.join(out, "diversity.csv"), ["sample_id", "head_diversity", "decorrelation"], div_rows)
    plt = _plots(args)
    if plt:
        n_real = int((~mask[0]).sum())
        plt.heatmap(heat, tokens, os.path.join(out, "heatmap.png"), crop=n_real)
        plt.pca_scatter(rows, os.path.join(out, "pca.png"))
    summary = dict(samples=n, head_diversity=float(np.mean([float(r[1]) for r in div_rows])),
                   decorrelation=float(np.mean([float(r[2]) for r in div_rows])))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_gen_data(args):
    out = _out_dir(args)
    task = args.task or "nli"
    seed = args.seed if args.seed is not None else 0
    if task == "nli":
        ds = generate_synthetic_nli(args.n, args.vocab_size, args.seq_len, seed)
    else:
        ds = generate_synthetic_ranking(args.claims, args.candidates, seed,
                                        vocab_size=max(args.vocab_size, 24), L=args.seq_len)
    for name, part in zip(("train", "dev", "test"), split_dataset(ds, seed)):
        write_tsv(os.path.join(out, f"{name}.tsv"), part)
    print(json.dumps(dict(task=task, examples=len(ds), out=out)))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _common(p, training=True):
    p.add_argument("--config", help="JSON file mirroring RunConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="TSV data file")
    p.add_argument("--task", choices=("nli", "ranking"))
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    if training:
        p.add_argument("--fraction", type=float, help="training-set fraction in (0, 1]")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--guide", choices=GUIDE_KINDS)
        p.add_argument("--layers", help="'all' or a 0/1 mask such as 10")
        p.add_argument("--epochs", type=int)
        p.add_argument("--workers", type=int, default=1, help="parallel runs for sweeps")


def make_parser():
    parser = _Parser(prog="attnguide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a TSV file")
    _common(p, training=False)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grid", help="alpha/beta grid search")
    _common(p)
    p.add_argument("--alphas", help="comma-separated alpha values")
    p.add_argument("--betas", help="comma-separated beta values")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("layer-sweep", help="guide one layer at a time, then all")
    _common(p)
    p.set_defaults(func=cmd_layer_sweep)

    p = sub.add_parser("size-sweep", help="guided vs unguided over training fractions")
    _common(p)
    p.add_argument("--fractions", help="comma-separated fractions (default 0.2..1.0)")
    p.set_defaults(func=cmd_size_sweep)

    p = sub.add_parser("analyze", help="heatmap, PCA and diversity CSVs for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int, default=8)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen-data", help="write synthetic train/dev/test TSV files")
    p.add_argument("--task", choices=("nli", "ranking"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--claims", type=int, default=300)
    p.add_argument("--candidates", type=int, default=5)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidArgumentError as exc:
        print(f"attnguide: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"attnguide: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"attnguide: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
