"""Synthetic multilingual world and the transfer / data-size / LM-fusion sweep."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .config import CorpusConfig, EpochPlan, ExperimentConfig, LanguageConfig, LmConfig, OptimizerPlan, dump_config
from .data import (
    Corpus,
    SyntheticLanguageSpec,
    Vocabulary,
    build_vocab,
    corpus_score,
    emission_table,
    generate_corpus,
    load_corpus,
    read_manifest,
    save_corpus,
    subset,
)
from .decode import DecodeConfig, decode_utterances, write_hypotheses
from .lm import CharRnnLm, LmArch, LmTrainConfig, lm_train
from .model import HybridModel, ModelArch
from .optim import ADADELTA, ADAM, OptimizerSpec
from .train import TrainConfig, epoch_checkpoint, run_stage0, run_stage1, run_stage2

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("size", "stage", "cer", "wer")


# ---------------------------------------------------------------- world


def language_specs(cfg: CorpusConfig) -> dict[str, SyntheticLanguageSpec]:
    symbols = {ch for lang in cfg.languages for ch in lang.inventory} | {" "}
    table = emission_table(symbols, cfg.dim, cfg.emission_seed, cfg.confusable, cfg.confusable_distance)
    specs = {}
    for lang in cfg.languages:
        specs[lang.name] = SyntheticLanguageSpec(
            lang.name,
            tuple(lang.inventory),
            table,
            lexicon_size=lang.lexicon_size,
            word_len=lang.word_len,
            words_per_utt=lang.words_per_utt,
            frames_per_grapheme=lang.frames_per_grapheme,
            noise=lang.noise,
            seed=cfg.emission_seed,
        )
    return specs


def world_vocab(cfg: CorpusConfig) -> Vocabulary:
    """Union over every configured language, target included."""
    return build_vocab(language_specs(cfg).values())


def generate_world(cfg: CorpusConfig, seed: int) -> dict[str, Corpus]:
    specs = language_specs(cfg)
    return {lang.name: generate_corpus(specs[lang.name], lang.n_utts, seed) for lang in cfg.languages}


def save_world(root: str | Path, cfg: CorpusConfig, corpora: dict[str, Corpus]) -> dict:
    """Write every corpus plus ``manifest.json`` (splits per language, pooled training set, target)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "languages": {name: {"splits": save_corpus(root, c)} for name, c in corpora.items()},
        "pooled": [lang.name for lang in cfg.train_languages],
        "target": cfg.target,
        "vocab": world_vocab(cfg).to_list(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def load_world(root: str | Path) -> tuple[dict[str, Corpus], dict]:
    manifest = read_manifest(root)
    return {name: load_corpus(root, name, manifest) for name in manifest["languages"]}, manifest


def default_world(n_utts: int = 500) -> CorpusConfig:
    """Four training languages and one target; the target has two graphemes no training language uses."""
    langs = [
        LanguageConfig("lang1", "abcdefghij", n_utts),
        LanguageConfig("lang2", "abcdefklmn", n_utts),
        LanguageConfig("lang3", "abcghiklop", n_utts),
        LanguageConfig("lang4", "defghijmnop", n_utts),
        LanguageConfig("target", "abdegikmnqr", n_utts),
    ]
    return CorpusConfig(
        dim=20,
        emission_seed=0,
        confusable=[("a", "b"), ("e", "f"), ("m", "n"), ("q", "o")],
        confusable_distance=2.0,
        languages=langs,
        target="target",
    )


def desk_config(seed: int = 0) -> ExperimentConfig:
    """Desk-scale settings used by the acceptance sweep (small network, synthetic world)."""
    desk_adadelta = OptimizerSpec(ADADELTA, lr=1.0, adadelta_eps=1e-6, adadelta_eps_decay=1e-2)
    return ExperimentConfig(
        seed=seed,
        arch=ModelArch(
            idim=20, elayers=2, eunits=64, eprojs=64, dunits=64, embed_dim=32, att_dim=64, aconv_chans=10, aconv_width=31
        ),
        train=TrainConfig(mol_lambda=0.5, batch_size=30, seed=seed),
        epochs=EpochPlan(stage0=60, mono=30, stage1=10, stage2=20),
        # a 64-unit net with a handful of updates per epoch stalls at eps 1e-8, and the
        # reference SGD rates leave stage 1 at its first epoch; AdaDelta at 1e-6 trains every stage
        optimizers=OptimizerPlan(stage0=desk_adadelta, mono=desk_adadelta, stage1=desk_adadelta, stage2=desk_adadelta),
        decode=DecodeConfig(beam=20, alpha=0.3, beta=0.0),
        lm=LmConfig(LmArch(units=128, layers=2, embed_dim=32), LmTrainConfig(epochs=15, batch_size=20, seed=seed, optimizer=OptimizerSpec(ADAM, 1e-2))),
        corpus=default_world(),
    )


# ---------------------------------------------------------------- sweep


@dataclass
class ResultRow:
    size: int
    stage: str
    cer: float
    wer: float


@dataclass
class SweepResult:
    rows: list[ResultRow]
    details: dict = field(default_factory=dict)

    def table(self) -> dict[tuple[int, str], ResultRow]:
        return {(r.size, r.stage): r for r in self.rows}


def write_results(path: str | Path, rows: Sequence[ResultRow]) -> None:
    lines = ["\t".join(RESULT_COLUMNS)]
    lines += [f"{r.size}\t{r.stage}\t{r.cer!r}\t{r.wer!r}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results(path: str | Path) -> list[ResultRow]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if tuple(lines[0].split("\t")) != RESULT_COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for line in lines[1:]:
        size, stage, c, w = line.split("\t")
        out.append(ResultRow(int(size), stage, float(c), float(w)))
    return out


def score_model(
    model: HybridModel, corpus_utts, cfg: DecodeConfig, lm: CharRnnLm | None = None, hyp_path: Path | None = None
) -> tuple[float, float]:
    records = decode_utterances(model, corpus_utts, cfg, lm)
    if hyp_path is not None:
        write_hypotheses(hyp_path, records)
    refs = {u.id: u.transcript for u in corpus_utts}
    pairs = [(r.id, r.text, refs[r.id]) for r in records]
    return corpus_score(pairs, "cer").rate, corpus_score(pairs, "wer").rate


def _stage_cfg(cfg: ExperimentConfig, epochs: int) -> TrainConfig:
    return replace(cfg.train, epochs=epochs, seed=cfg.seed)


def run_sweep(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    with_lm: bool = True,
    sizes: Sequence[int] | None = None,
    corpora: dict[str, Corpus] | None = None,
    progress: Callable[[str], None] | None = None,
) -> SweepResult:
    """Monolingual, stage-1 and stage-2 models per target subset size (plus stage-2 with LM fusion).

    The LM weight is picked on the target dev split from ``cfg.lm_betas``;
    all reported numbers are on the target eval split.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    say = progress or (lambda msg: log.info(msg))
    sizes = list(sizes if sizes is not None else cfg.subset_sizes)
    if corpora is None:
        corpora = generate_world(cfg.corpus, cfg.seed)
    vocab = world_vocab(cfg.corpus)
    target = corpora[cfg.corpus.target]
    if max(sizes) > len(target.train):
        raise ValueError(f"largest subset {max(sizes)} exceeds the {len(target.train)} target training utterances")
    pooled = [corpora[lang.name] for lang in cfg.corpus.train_languages]
    details: dict = {"timing": {}, "beta": {}, "best_epoch": {}}
    t0 = time.perf_counter()

    say("stage0: pooled training on " + ", ".join(c.lang for c in pooled))
    s0 = run_stage0(pooled, _stage_cfg(cfg, cfg.epochs.stage0), cfg.arch, vocab, out / "stage0", cfg.optimizers.stage0)
    prior = s0.model if cfg.prior_epoch is None else HybridModel.load(epoch_checkpoint(out / "stage0", cfg.prior_epoch))
    details["best_epoch"]["stage0"] = s0.best_epoch
    details["timing"]["stage0"] = time.perf_counter() - t0

    lm = None
    if with_lm:
        t1 = time.perf_counter()
        say("lm: training on the target training transcripts")
        lm, hist = lm_train(
            [u.transcript for u in target.train], vocab, replace(cfg.lm.train, seed=cfg.seed), cfg.lm.arch, [u.transcript for u in target.dev]
        )
        lm.save(out / "lm.ckpt")
        details["lm_dev_perplexity"] = [h.dev_perplexity for h in hist]
        details["timing"]["lm"] = time.perf_counter() - t1

    rows: list[ResultRow] = []
    for n in sizes:
        t1 = time.perf_counter()
        sub = subset(target.train, n)
        size_dir = out / f"size{n}"
        mono_corpus = Corpus(target.lang, sub, target.dev, target.eval)
        say(f"size {n}: monolingual")
        mono = run_stage0([mono_corpus], _stage_cfg(cfg, cfg.epochs.mono), cfg.arch, vocab, size_dir / "mono", cfg.optimizers.mono)
        say(f"size {n}: stage1")
        s1 = run_stage1(prior, target, _stage_cfg(cfg, cfg.epochs.stage1), sub, cfg.arch, size_dir / "stage1", cfg.optimizers.stage1)
        say(f"size {n}: stage2")
        s2 = run_stage2(s1.model, target, _stage_cfg(cfg, cfg.epochs.stage2), sub, cfg.arch, size_dir / "stage2", cfg.optimizers.stage2)
        for name, res in (("mono", mono), ("stage1", s1), ("stage2", s2)):
            details["best_epoch"][f"{n}/{name}"] = res.best_epoch
            c, w = score_model(res.model, target.eval, cfg.decode, None, size_dir / f"{name}.hyp")
            rows.append(ResultRow(n, name, c, w))
            say(f"size {n}: {name} CER {c:.2f} WER {w:.2f}")
        if lm is not None:
            t2 = time.perf_counter()
            best = None
            for beta in cfg.lm_betas:
                dcfg = replace(cfg.decode, beta=beta)
                _, dev_wer = score_model(s2.model, target.dev, dcfg, lm)
                if best is None or dev_wer < best[1]:
                    best = (beta, dev_wer)
            details["beta"][str(n)] = best[0]
            c, w = score_model(s2.model, target.eval, replace(cfg.decode, beta=best[0]), lm, size_dir / "stage2_lm.hyp")
            rows.append(ResultRow(n, "stage2+lm", c, w))
            say(f"size {n}: stage2+lm (beta {best[0]}) CER {c:.2f} WER {w:.2f}")
            details["timing"][f"size{n}/lm"] = time.perf_counter() - t2
        details["timing"][f"size{n}"] = time.perf_counter() - t1
    details["timing"]["total"] = time.perf_counter() - t0
    write_results(out / "results.tsv", rows)
    (out / "summary.json").write_text(json.dumps(details, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return SweepResult(rows, details)
