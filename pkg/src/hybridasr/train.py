"""Training loop and the three-stage transfer protocol (pooled pretraining, decoder retraining, full fine-tuning)."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as nt
from .ctc import InfeasibleAlignment
from .data import Corpus, Utterance, Vocabulary, VocabularyError, corpus_score
from .decode import greedy_attention
from .model import CTC, DECODER, GROUPS, HybridModel, ModelArch, batch_loss, batch_losses, ctc_feasible
from .optim import ADADELTA, SGD, Optimizer, OptimizerSpec, clip_grad_norm

log = logging.getLogger(__name__)

STAGES = ("stage0", "stage1", "stage2")


class DivergenceError(RuntimeError):
    pass


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    mol_lambda: float = 0.5
    batch_size: int = 30
    epochs: int = 15
    seed: int = 0
    grad_clip: float = 5.0
    divergence_patience: int = 3
    report_cer: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mol_lambda <= 1.0:
            raise ValueError("mol_lambda must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.divergence_patience < 1:
            raise ValueError("batch_size and divergence_patience must be >= 1, epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def default_optimizer(stage: str) -> OptimizerSpec:
    if stage == "stage0":
        return OptimizerSpec(ADADELTA, lr=1.0, adadelta_eps=1e-8, adadelta_eps_decay=1e-2)
    if stage == "stage1":
        return OptimizerSpec(SGD, lr=1e-4, sgd_decay_factor=0.1)
    if stage == "stage2":
        return OptimizerSpec(SGD, lr=1e-2, sgd_decay_factor=0.1)
    raise ValueError(f"unknown stage {stage!r}")


DEFAULT_TRAINABLE = {
    "stage0": GROUPS,
    "stage1": (CTC, DECODER),
    "stage2": GROUPS,
}


@dataclass
class StagePlan:
    stage: str
    init_from: str | None = None
    trainable: tuple[str, ...] = ()
    optimizer: OptimizerSpec | None = None
    languages: tuple[str, ...] = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.trainable:
            self.trainable = DEFAULT_TRAINABLE[self.stage]
        self.trainable = tuple(self.trainable)
        if self.optimizer is None:
            self.optimizer = default_optimizer(self.stage)
        unknown = set(self.trainable) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if self.stage == "stage0" and self.init_from is not None:
            raise ValueError("stage0 trains from scratch and takes no init_from")
        if self.stage == "stage1" and set(self.trainable) != {CTC, DECODER}:
            raise ValueError("stage1 must freeze the encoder and train the CTC head and attention decoder")
        if self.stage == "stage2" and set(self.trainable) != set(GROUPS):
            raise ValueError("stage2 trains every parameter group")


# ---------------------------------------------------------------- batching and evaluation


def make_batches(utts: Sequence[Utterance], batch_size: int) -> list[list[Utterance]]:
    """Length-sorted buckets (stable on id), so batches hold similar-length utterances."""
    ordered = sorted(utts, key=lambda u: (u.n_frames, u.id))
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    n_utts: int


def evaluate(model: HybridModel, utts: Sequence[Utterance], lam: float, batch_size: int = 50) -> EvalResult:
    """Mean multi-objective loss and teacher-forced label accuracy over the CTC-feasible utterances."""
    total_loss = 0.0
    n_loss = 0
    correct = 0
    count = 0
    with nt.no_grad():
        for batch in make_batches(utts, batch_size):
            try:
                res = batch_losses(model, batch, lam)
            except InfeasibleAlignment:
                continue
            total_loss += float(res.total.data) * res.n_utts
            n_loss += res.n_utts
            correct += res.correct
            count += res.count
    return EvalResult(total_loss / n_loss if n_loss else float("nan"), correct / count if count else 0.0, n_loss)


def greedy_cer(model: HybridModel, utts: Sequence[Utterance]) -> float:
    pairs = []
    for u in utts:
        hyp = greedy_attention(model, u.features)
        pairs.append((u.id, model.vocab.decode(hyp.labels), u.transcript))
    return corpus_score(pairs, "cer").rate


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    eps: float
    skipped: int = 0
    cer: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class StageResult:
    model: HybridModel
    history: list[EpochRecord]
    best_epoch: int
    best_accuracy: float
    decays: int = 0
    checkpoints: dict[int, Path] = field(default_factory=dict)


def epoch_checkpoint(out_dir: str | Path, epoch: int) -> Path:
    return Path(out_dir) / f"epoch{epoch:03d}.ckpt"


def train_model(
    model: HybridModel,
    train: Sequence[Utterance],
    dev: Sequence[Utterance],
    plan: StagePlan,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    cer_sets: dict[str, Sequence[Utterance]] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> StageResult:
    """Train ``model`` in place; on return it holds the best-validation-accuracy parameters.

    After every epoch the validation accuracy is compared with the running
    best; a strict drop decays the optimizer (SGD lr or AdaDelta eps).
    """
    lam = cfg.mol_lambda
    model.set_trainable(plan.trainable)
    params = {k: p for k, p in model.named_parameters() if p.requires_grad}
    opt = Optimizer(plan.optimizer)
    usable = [u for u in train if lam == 0.0 or ctc_feasible(model, u)]
    if len(usable) < len(train):
        log.warning("%s: %d utterances too short for CTC were dropped", plan.stage, len(train) - len(usable))
    if not usable:
        raise InfeasibleAlignment("no trainable utterance")
    batches = make_batches(usable, cfg.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_file = (out / "train_log.jsonl").open("w", encoding="utf-8") if out is not None else None

    def emit(rec: EpochRecord):
        if log_file is not None:
            log_file.write(rec.to_json() + "\n")
            log_file.flush()
        if on_epoch is not None:
            on_epoch(rec)

    history: list[EpochRecord] = []
    best_acc = -1.0
    best_epoch = 0
    best_state = model.state_dict()
    decays = 0
    checkpoints: dict[int, Path] = {}
    bad_run = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch])
            losses = []
            skipped = 0
            for b in rng.permutation(len(batches)):
                loss = batch_loss(model, batches[b], lam)
                grads = nt.backward(loss) if np.isfinite(loss.data) else None
                model.zero_grad()
                named = {k: grads[p] for k, p in params.items() if p in grads} if grads is not None else None
                if named is not None:
                    clip_grad_norm(named, cfg.grad_clip)
                if named is None or not opt.step({k: params[k].data for k in named}, named):
                    skipped += 1
                    bad_run += 1
                    log.warning("%s epoch %d: non-finite loss or gradient, batch skipped", plan.stage, epoch)
                    if bad_run >= cfg.divergence_patience:
                        raise DivergenceError(f"{bad_run} consecutive non-finite batches")
                    continue
                bad_run = 0
                losses.append(float(loss.data))
            train_rec = EpochRecord(plan.stage, epoch, "train", float(np.mean(losses)) if losses else float("nan"), float("nan"), opt.lr, opt.eps, skipped)
            ev = evaluate(model, dev, lam)
            cer = {lang: greedy_cer(model, utts) for lang, utts in (cer_sets or {}).items()} if cfg.report_cer else {}
            dev_rec = EpochRecord(plan.stage, epoch, "dev", ev.loss, ev.accuracy, opt.lr, opt.eps, 0, cer)
            if ev.accuracy > best_acc:
                best_acc = ev.accuracy
                best_epoch = epoch
                best_state = model.state_dict()
            elif ev.accuracy < best_acc:
                opt.decay()
                decays += 1
            history += [train_rec, dev_rec]
            emit(train_rec)
            emit(dev_rec)
            if out is not None:
                path = epoch_checkpoint(out, epoch)
                model.save(path, {"stage": plan.stage, "epoch": epoch, "dev_accuracy": ev.accuracy})
                checkpoints[epoch] = path
    finally:
        if log_file is not None:
            log_file.close()
    model.load_state_dict(best_state)
    if out is not None:
        model.save(out / "model.best.ckpt", {"stage": plan.stage, "epoch": best_epoch, "dev_accuracy": best_acc})
    model.set_trainable(GROUPS)
    return StageResult(model, history, best_epoch, best_acc, decays, checkpoints)


# ---------------------------------------------------------------- stages


def check_vocab(vocab: Vocabulary, corpora: Sequence[Corpus]) -> None:
    for corpus in corpora:
        for u in corpus.all():
            missing = sorted(set(u.transcript) - set(vocab.graphemes))
            if missing:
                raise VocabularyError(f"{corpus.lang}: graphemes {missing} missing from the model vocabulary")


def _as_model(prior: HybridModel | ckpt_io.Checkpoint | str | Path) -> HybridModel:
    if isinstance(prior, HybridModel):
        return HybridModel.from_checkpoint(prior.to_checkpoint())
    if isinstance(prior, ckpt_io.Checkpoint):
        return HybridModel.from_checkpoint(prior)
    return HybridModel.load(prior)


def run_stage0(
    corpora: Sequence[Corpus],
    cfg: TrainConfig,
    arch: ModelArch,
    vocab: Vocabulary,
    out_dir: str | Path | None = None,
    optimizer: OptimizerSpec | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> StageResult:
    """Pooled training from scratch on every corpus in ``corpora``.

    ``vocab`` must already include every grapheme of the held-out target
    languages. A single corpus gives ordinary monolingual training.
    """
    if not corpora:
        raise ValueError("stage0 needs at least one corpus")
    check_vocab(vocab, corpora)
    plan = StagePlan("stage0", optimizer=optimizer, languages=tuple(c.lang for c in corpora))
    model = HybridModel(arch, vocab, seed=cfg.seed)
    train = [u for c in corpora for u in c.train]
    dev = [u for c in corpora for u in c.dev]
    cer_sets = {c.lang: c.dev for c in corpora}
    return train_model(model, train, dev, plan, cfg, out_dir, cer_sets, on_epoch)


def _transfer(
    stage: str,
    prior,
    target: Corpus,
    cfg: TrainConfig,
    train: Sequence[Utterance] | None,
    arch: ModelArch | None,
    out_dir,
    optimizer: OptimizerSpec | None,
    on_epoch,
) -> StageResult:
    model = _as_model(prior)
    if arch is not None and model.arch != arch:
        raise ArchitectureMismatch(f"prior architecture {model.arch} does not match {arch}")
    check_vocab(model.vocab, [target])
    init = str(prior) if isinstance(prior, (str, Path)) else None
    plan = StagePlan(stage, init_from=init, optimizer=optimizer, languages=(target.lang,))
    train_utts = list(target.train if train is None else train)
    return train_model(model, train_utts, target.dev, plan, cfg, out_dir, {target.lang: target.dev}, on_epoch)


def run_stage1(
    prior,
    target: Corpus,
    cfg: TrainConfig,
    train: Sequence[Utterance] | None = None,
    arch: ModelArch | None = None,
    out_dir: str | Path | None = None,
    optimizer: OptimizerSpec | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> StageResult:
    """Retrain the CTC head and attention decoder on ``target``; the encoder stays frozen.

    ``train`` selects a subset of the target training split (default: all of it).
    """
    return _transfer("stage1", prior, target, cfg, train, arch, out_dir, optimizer, on_epoch)


def run_stage2(
    stage1,
    target: Corpus,
    cfg: TrainConfig,
    train: Sequence[Utterance] | None = None,
    arch: ModelArch | None = None,
    out_dir: str | Path | None = None,
    optimizer: OptimizerSpec | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> StageResult:
    """Fine-tune every parameter group starting from the stage-1 model."""
    return _transfer("stage2", stage1, target, cfg, train, arch, out_dir, optimizer, on_epoch)


def parameter_diff(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> dict[str, bool]:
    """Per-tensor flag: True when the raw bytes differ."""
    return {k: before[k].tobytes() != after[k].tobytes() for k in before}


def group_changes(model: HybridModel, before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> dict[str, bool]:
    out = {g: False for g in GROUPS}
    for name, changed in parameter_diff(before, after).items():
        out[model.group_of(name)] |= changed
    return out

