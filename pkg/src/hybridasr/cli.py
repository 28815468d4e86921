"""Command-line entry point: ``hybridasr {gen,train,decode,score,sweep,lm-train}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, dump_config, load_config, override
from .ctc import InfeasibleAlignment
from .data import Corpus, VocabularyError, corpus_score, read_transcripts, subset
from .decode import VocabularyMismatch, decode_utterances, read_hypotheses, write_hypotheses
from .experiment import desk_config, generate_world, load_world, run_sweep, save_world, world_vocab
from .lm import CharRnnLm, lm_train
from .model import HybridModel
from .train import ArchitectureMismatch, DivergenceError, epoch_checkpoint, run_stage0, run_stage1, run_stage2

log = logging.getLogger("hybridasr")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

DATA_ERRORS = (
    VocabularyError,
    VocabularyMismatch,
    ArchitectureMismatch,
    CheckpointError,
    InfeasibleAlignment,
    FileNotFoundError,
)


class UsageError(ConfigError):
    """Inconsistent command-line arguments."""


# ---------------------------------------------------------------- helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg = override(cfg, key, yaml.safe_load(raw))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    return cfg


def _world(args, cfg: ExperimentConfig) -> tuple[dict[str, Corpus], dict]:
    data = args.data or cfg.data_dir
    if not data:
        raise UsageError("no corpus directory: pass --data or set data_dir in the config")
    return load_world(data)


def _out(path: str, cfg: ExperimentConfig) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    return out


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = _config(args)
    corpora = generate_world(cfg.corpus, cfg.seed)
    out = _out(args.out, cfg)
    manifest = save_world(out, cfg.corpus, corpora)
    for name, entry in manifest["languages"].items():
        counts = "/".join(str(entry["splits"][s]["count"]) for s in ("train", "dev", "eval"))
        _say(f"{name}: {counts} utterances (train/dev/eval)")
    return EXIT_OK


def _resolve_init(args) -> Path:
    if args.init is None:
        raise UsageError(f"--stage {args.stage} requires --init")
    init = Path(args.init)
    if args.prior_epoch is not None:
        if not init.is_dir():
            raise UsageError("--prior-epoch needs --init to name a stage-0 output directory")
        return epoch_checkpoint(init, args.prior_epoch)
    if init.is_dir():
        return init / "model.best.ckpt"
    return init


def cmd_train(args) -> int:
    cfg = _config(args)
    corpora, manifest = _world(args, cfg)
    out = _out(args.out, cfg)
    epochs = args.epochs
    report = lambda rec: _say(f"{rec.stage} epoch {rec.epoch} {rec.split} loss {rec.loss:.4f} acc {rec.accuracy:.4f}")
    if args.stage == 0:
        if args.init is not None or args.prior_epoch is not None:
            raise UsageError("--stage 0 trains from scratch; --init/--prior-epoch are not accepted")
        langs = args.lang or manifest["pooled"]
        missing = [name for name in langs if name not in corpora]
        if missing:
            raise UsageError(f"unknown languages {missing}")
        sel = [corpora[name] for name in langs]
        if args.subset is not None:
            sel = [Corpus(c.lang, subset(c.train, args.subset), c.dev, c.eval) for c in sel]
        tcfg = replace(cfg.train, epochs=cfg.epochs.stage0 if epochs is None else epochs)
        res = run_stage0(sel, tcfg, cfg.arch, world_vocab(cfg.corpus), out, cfg.optimizers.stage0, report)
    else:
        init = _resolve_init(args)
        target_name = (args.lang or [manifest["target"]])[0]
        if target_name not in corpora:
            raise UsageError(f"unknown language {target_name!r}")
        target = corpora[target_name]
        train = subset(target.train, args.subset) if args.subset is not None else None
        if args.stage == 1:
            tcfg = replace(cfg.train, epochs=cfg.epochs.stage1 if epochs is None else epochs)
            res = run_stage1(init, target, tcfg, train, cfg.arch, out, cfg.optimizers.stage1, report)
        else:
            tcfg = replace(cfg.train, epochs=cfg.epochs.stage2 if epochs is None else epochs)
            res = run_stage2(init, target, tcfg, train, cfg.arch, out, cfg.optimizers.stage2, report)
    _say(f"best epoch {res.best_epoch} (dev accuracy {res.best_accuracy:.4f}); wrote {out / 'model.best.ckpt'}")
    return EXIT_OK


def cmd_decode(args) -> int:
    cfg = _config(args)
    dcfg = cfg.decode
    if args.beam is not None:
        dcfg = replace(dcfg, beam=args.beam)
    if args.ctc_weight is not None:
        dcfg = replace(dcfg, alpha=args.ctc_weight)
    if args.lm_weight is not None:
        dcfg = replace(dcfg, beta=args.lm_weight)
    if dcfg.beta > 0 and not args.lm:
        raise UsageError("--lm-weight > 0 requires --lm")
    cfg = replace(cfg, decode=dcfg)
    corpora, manifest = _world(args, cfg)
    lang = args.lang or manifest["target"]
    if lang not in corpora:
        raise UsageError(f"unknown language {lang!r}")
    model = HybridModel.load(args.model)
    lm = CharRnnLm.load(args.lm) if args.lm else None
    out = Path(args.out)
    _out(str(out.parent), cfg)
    records = decode_utterances(model, corpora[lang].split(args.split), dcfg, lm)
    write_hypotheses(out, records)
    _say(f"decoded {len(records)} utterances to {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    hyps = {r.id: r.text for r in read_hypotheses(args.hyp)}
    refs = read_transcripts(args.ref)
    if set(hyps) != set(refs):
        only_h = sorted(set(hyps) - set(refs))[:5]
        only_r = sorted(set(refs) - set(hyps))[:5]
        raise ValueError(f"id mismatch: hypothesis-only {only_h}, reference-only {only_r}")
    report = corpus_score(((uid, hyps[uid], refs[uid]) for uid in sorted(refs)), args.metric)
    lines = ["id\terrors\tref_len"] + [f"{uid}\t{e}\t{n}" for uid, e, n in report.per_utt]
    lines.append(f"# {args.metric} {report.rate:.4f} ({report.errors}/{report.ref_len})")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text if args.verbose else lines[-1] + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.subset_sizes:
        cfg = replace(cfg, subset_sizes=args.subset_sizes)
    if args.prior_epoch is not None:
        cfg = replace(cfg, prior_epoch=args.prior_epoch)
    corpora = load_world(args.data or cfg.data_dir)[0] if (args.data or cfg.data_dir) else None
    out = _out(args.out, cfg)
    res = run_sweep(cfg, out, with_lm=args.with_lm, corpora=corpora, progress=_say)
    for r in res.rows:
        _say(f"{r.size}\t{r.stage}\t{r.cer:.2f}\t{r.wer:.2f}")
    return EXIT_OK


def cmd_lm_train(args) -> int:
    cfg = _config(args)
    corpora, manifest = _world(args, cfg)
    lang = args.lang or manifest["target"]
    if lang not in corpora:
        raise UsageError(f"unknown language {lang!r}")
    corpus = corpora[lang]
    tcfg = cfg.lm.train if args.epochs is None else replace(cfg.lm.train, epochs=args.epochs)
    out = _out(args.out, cfg)
    lm, _ = lm_train(
        [u.transcript for u in corpus.train],
        world_vocab(cfg.corpus),
        replace(tcfg, seed=cfg.seed),
        cfg.lm.arch,
        [u.transcript for u in corpus.dev],
        on_epoch=lambda e: _say(f"lm epoch {e.epoch} loss {e.train_loss:.4f} dev perplexity {e.dev_perplexity:.4f}"),
    )
    lm.save(out / "lm.ckpt")
    _say(f"wrote {out / 'lm.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="YAML or JSON experiment config (default: built-in desk config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field, e.g. decode.beam=5")
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--data", help="corpus directory written by 'gen'")


def _weight(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("weights must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridasr", description="Hybrid CTC/attention recognition toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic multilingual corpus")
    _common(p, data=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run one training stage")
    _common(p)
    p.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    p.add_argument("--init", help="prior checkpoint, or a stage output directory")
    p.add_argument("--prior-epoch", type=int, help="use epoch K of the stage-0 directory given by --init")
    p.add_argument("--lang", action="append", help="training language(s); stage 0 defaults to the pooled set, stages 1/2 to the target")
    p.add_argument("--subset", type=int, help="use only the first N training utterances")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="joint CTC/attention beam search")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--lm")
    p.add_argument("--beam", type=int)
    p.add_argument("--ctc-weight", type=_weight)
    p.add_argument("--lm-weight", type=_weight)
    p.add_argument("--lang")
    p.add_argument("--split", choices=("train", "dev", "eval"), default="eval")
    p.add_argument("--out", required=True, help="hypothesis file (TSV)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="corpus CER or WER of a hypothesis file")
    p.add_argument("hyp")
    p.add_argument("ref", help="reference transcripts, 'id<TAB>text' per line")
    p.add_argument("--metric", choices=("cer", "wer"), default="cer")
    p.add_argument("--out", help="write the per-utterance report here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="transfer / data-size / LM-fusion sweep")
    _common(p)
    p.add_argument("--subset-sizes", type=int, nargs="+")
    p.add_argument("--with-lm", action="store_true")
    p.add_argument("--prior-epoch", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lm-train", help="train the character RNN language model")
    _common(p)
    p.add_argument("--lang")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
