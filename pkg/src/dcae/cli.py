"""Command-line entry point: ``dcae <command> [options]``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric fault, 5 check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .config import ConfigError, RunConfig, load_run_config

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5

log = logging.getLogger("dcae")


class DataError(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.set or (), args.seed)
    if getattr(args, "out", None):
        cfg.out = Path(args.out)
    return cfg


def cmd_gen_corpus(args) -> int:
    from .corpus import gen_corpus

    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.corpus_path
    corpus = gen_corpus(cfg.corpus, out)
    n_test = sum(len(v) for v in corpus.test.values())
    print(f"wrote {len(corpus.train)} train and {n_test} test utterances to {out}")
    return EXIT_OK


def _load_corpus_dir(path: Path):
    from .corpus import load_manifest, read_lexicon

    if not (path / "train.scp").exists() or not (path / "lexicon.txt").exists():
        raise DataError(f"no corpus at {path}; run gen-corpus first")
    return load_manifest(path / "train.scp"), read_lexicon(path / "lexicon.txt")


def cmd_train(args) -> int:
    from .model import Model
    from .train import chain_setup, train

    cfg = _config(args)
    utts, vocab = _load_corpus_dir(cfg.corpus_path)
    if args.jobs:
        from dataclasses import replace
        cfg.train = replace(cfg.train, jobs=args.jobs)
    setup = chain_setup(utts, [w.phones for w in vocab], cfg.corpus.num_phones)
    model = Model(cfg.model_config())
    _, history = train(model, utts, cfg.train, setup, out_dir=cfg.out)
    print(f"trained {model.config.kind} for {len(history)} epochs; "
          f"total loss {history[0].total:.4f} -> {history[-1].total:.4f}; outputs in {cfg.out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .train import grad_check, grad_check_case
    from .loss import LossWeights

    cfg = _config(args)
    gc = dict(cfg.grad_check)
    max_coords = gc.pop("max_coords", None)
    model, utt, targets, den = grad_check_case(args.kind, args.unet, args.weight,
                                               seed=cfg.model.get("seed", 0), **gc)
    weights = LossWeights(cfg.train.alpha, cfg.train.beta, cfg.train.ce_weight)
    report = grad_check(model, utt, targets, den, weights, eps=args.eps, max_coords=max_coords)
    print(f"grad-check kind={args.kind} unet={args.unet} eps={args.eps}")
    print(report.render())
    return EXIT_OK if report.passed else EXIT_CHECK


def _corpus_root(manifest: Path) -> Path:
    return manifest.parent


def cmd_decode(args) -> int:
    from .corpus import load_manifest, read_lexicon
    from .eval import decode_logits
    from .graph import Topology, build_decode_graph, estimate_bigram
    from .model import load_model, strip_decoders

    model = strip_decoders(load_model(args.checkpoint))
    manifests = [Path(m) for m in args.manifest]
    root = _corpus_root(manifests[0])
    vocab = read_lexicon(root / "lexicon.txt")
    train_utts = load_manifest(root / "train.scp") if (root / "train.scp").exists() else None
    if not train_utts:
        raise DataError(f"{root / 'train.scp'} is needed to estimate the word LM")
    lm = estimate_bigram([u.transcript for u in train_utts], len(vocab))
    topo = Topology(model.config.num_senones // 2)
    graph = build_decode_graph([w.phones for w in vocab], lm, topo)
    utts = [u for m in manifests for u in load_manifest(m)]

    def one(u):
        words = decode_logits(model.forward(u.noisy, u.spk_embed).senone_logits, graph)
        return f"{u.id}\t{' '.join(vocab[w].name for w in words)}\n"

    jobs = args.jobs or 1
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            lines = list(pool.map(one, utts))
    else:
        lines = [one(u) for u in utts]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(lines), encoding="utf-8")
    print(f"decoded {len(lines)} utterances to {out}")
    return EXIT_OK


def read_hyp_file(path) -> dict[str, list[str]]:
    hyps = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{n}: expected id<TAB>words")
        uid, words = line.split("\t", 1)
        hyps[uid] = words.split()
    return hyps


def cmd_report(args) -> int:
    from .corpus import load_manifest, read_lexicon
    from .eval import (loss_curves_svg, read_report_csv, render_table, report, report_csv,
                       score_corpus, wer_bars_svg)
    from .train import read_history

    refs, conds = {}, {}
    for m in args.ref:
        m = Path(m)
        vocab = read_lexicon(_corpus_root(m) / "lexicon.txt")
        for u in load_manifest(m):
            refs[u.id] = [vocab[w].name for w in u.transcript]
            conds[u.id] = u.condition
    systems = []
    for spec in args.hyp:
        name, _, path = spec.rpartition("=") if "=" in spec else (Path(spec).stem, "", spec)
        unet = "-"
        if ":" in name:
            name, unet = name.split(":", 1)
        wers, counts = score_corpus(refs, read_hyp_file(path), conds)
        systems.append((name, unet, wers, counts))
    baseline = None
    if args.baseline:
        prior = read_report_csv(Path(args.baseline).read_text(encoding="utf-8"))
        pick = [r for r in prior if r.system == args.baseline_system] if args.baseline_system else prior
        if not pick:
            raise DataError(f"baseline system {args.baseline_system!r} not in {args.baseline}")
        baseline = pick[0]
    elif args.baseline_system:
        match = [s for s in systems if s[0] == args.baseline_system]
        if not match:
            raise DataError(f"baseline system {args.baseline_system!r} not among --hyp inputs")
        baseline = report(*match[0][:1], match[0][2], match[0][3], unet=match[0][1])
    reports = [report(name, w, c, baseline, unet) for name, unet, w, c in systems]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_csv(reports), encoding="utf-8")
    table = render_table(reports)
    (out / "report.txt").write_text(table, encoding="utf-8")
    (out / "wer_by_condition.svg").write_text(wer_bars_svg(reports), encoding="utf-8")
    if args.history:
        (out / "loss_curves.svg").write_text(loss_curves_svg(read_history(args.history)),
                                             encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, out_help):
        sp.add_argument("--config", required=True,
                        help="JSON run config, or the name of a bundled config (e.g. smoke)")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
        sp.add_argument("--seed", type=int, help="seed for corpus, model and training")
        sp.add_argument("--jobs", type=int, default=None, help="intra-command concurrency")

    sp = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    with_config(sp, "corpus directory (default: <config out>/corpus)")
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("train", help="train a model; writes history.csv and checkpoints")
    with_config(sp, "output directory (default: config 'out')")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("grad-check", help="finite-difference check of the full objective")
    with_config(sp, "unused; accepted for symmetry")
    sp.add_argument("--kind", required=True, choices=("baseline", "c_dcae", "pc_dcae", "hc_dcae"))
    sp.add_argument("--unet", default="none", choices=("none", "sum", "concat", "diff_concat"))
    sp.add_argument("--weight", type=float, default=0.5, help="U-Net weight")
    sp.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("decode", help="decode manifests into a hypothesis file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True, action="append", help="repeatable")
    sp.add_argument("--out", required=True, help="hypothesis file (id<TAB>words)")
    sp.add_argument("--jobs", type=int, default=None, help="intra-command concurrency")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("report", help="score hypotheses and render the WER table")
    sp.add_argument("--hyp", required=True, action="append",
                    help="hypothesis file, optionally NAME[:UNET]=PATH (repeatable)")
    sp.add_argument("--ref", required=True, action="append", help="reference manifest (repeatable)")
    sp.add_argument("--baseline", help="earlier report.csv holding the baseline system")
    sp.add_argument("--baseline-system", help="baseline system name")
    sp.add_argument("--history", help="history.csv for loss_curves.svg")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .corpus import CorpusFormatError
    from .graph import NoAcceptingPathError
    from .model import ModelFormatError
    from .train import TrainingFault

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusFormatError, ModelFormatError, NoAcceptingPathError,
            FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
