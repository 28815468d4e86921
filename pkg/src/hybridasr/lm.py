"""Character-level two-layer LSTM language model used for shallow fusion."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as nt
from .data import Vocabulary
from .layers import Linear, LSTMCell, Module, uniform
from .optim import ADAM, Optimizer, OptimizerSpec, clip_grad_norm
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class LmArch:
    units: int = 256
    layers: int = 2
    embed_dim: int = 64

    def __post_init__(self):
        if self.units < 1 or self.layers < 1 or self.embed_dim < 1:
            raise ValueError("LM sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LmArch":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown LM architecture keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LmState:
    """(h, c) per layer. Arrays are (H,) for a single history or (B, H) batched."""

    h: tuple[np.ndarray, ...]
    c: tuple[np.ndarray, ...]

    def select(self, rows: np.ndarray) -> "LmState":
        return LmState(tuple(x[rows] for x in self.h), tuple(x[rows] for x in self.c))


class CharRnnLm(Module):
    """Embedding over graphemes + sos, stacked LSTMs, softmax over graphemes + eos."""

    def __init__(self, vocab: Vocabulary, arch: LmArch | None = None, seed: int = 0):
        self.vocab = vocab
        self.arch = arch or LmArch()
        rng = np.random.default_rng(seed)
        a = self.arch
        self.embed = uniform(rng, (vocab.n_inputs, a.embed_dim))
        self.cells = [LSTMCell(a.embed_dim if k == 0 else a.units, a.units, rng) for k in range(a.layers)]
        self.output = Linear(a.units, vocab.n_labels + 1, rng)

    @property
    def n_outputs(self) -> int:
        return self.vocab.n_labels + 1

    def initial_state(self, batch: int | None = None) -> LmState:
        shape = (self.arch.units,) if batch is None else (batch, self.arch.units)
        zeros = tuple(np.zeros(shape) for _ in self.cells)
        return LmState(zeros, tuple(np.zeros(shape) for _ in self.cells))

    def step_numpy(self, state: LmState, labels: np.ndarray) -> tuple[np.ndarray, LmState]:
        """Batched inference step: consume ``labels`` (B,), return (B, V+1) log-probs."""
        x = self.embed.data[labels]
        hs, cs = [], []
        for cell, h, c in zip(self.cells, state.h, state.c):
            x, c_new = cell.step_numpy(x, h, c)
            hs.append(x)
            cs.append(c_new)
        logits = x @ self.output.weight.data.T + self.output.bias.data
        m = logits.max(axis=-1, keepdims=True)
        log_dist = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
        return log_dist, LmState(tuple(hs), tuple(cs))

    # ---------------------------------------------------------------- persistence

    def to_checkpoint(self, meta: dict | None = None) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint("lm", self.arch.to_dict(), self.vocab.to_list(), self.state_dict(), meta or {})

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        ckpt_io.save(path, self.to_checkpoint(meta))

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "CharRnnLm":
        if ck.kind != "lm":
            raise ckpt_io.CheckpointError(f"expected an LM checkpoint, got {ck.kind!r}")
        lm = cls(Vocabulary.from_list(ck.vocab), LmArch.from_dict(ck.arch))
        lm.load_state_dict(ck.params)
        return lm

    @classmethod
    def load(cls, path: str | Path) -> "CharRnnLm":
        return cls.from_checkpoint(ckpt_io.load(path))


def lm_step(lm: CharRnnLm, state: LmState, label: int | str) -> tuple[np.ndarray, LmState]:
    """Consume one grapheme (or sos) and return the log-distribution over the next symbol.

    ``label`` may be a character or an id; ``"<sos>"`` / ``vocab.sos`` starts a sentence.
    Output index ``vocab.eos`` is end of sentence.
    """
    vocab = lm.vocab
    if isinstance(label, str):
        if label == "<sos>":
            idx = vocab.sos
        else:
            idx = vocab.encode(label)[0] if len(label) == 1 else -1
            if idx < 0:
                raise ValueError(f"lm_step: unknown grapheme {label!r}")
    else:
        idx = int(label)
        if not (0 <= idx < vocab.n_labels or idx == vocab.sos):
            raise ValueError(f"lm_step: unknown label id {label}")
    log_dist, new = lm.step_numpy(state, np.array([idx]))
    return log_dist[0], LmState(tuple(h[0] for h in new.h), tuple(c[0] for c in new.c))


def sequence_nll(lm: CharRnnLm, labels: Sequence[int]) -> Tensor:
    """-log p(labels, eos) summed over positions; differentiable."""
    vocab = lm.vocab
    if any(not 0 <= c < vocab.n_labels for c in labels):
        raise ValueError("sequence_nll: label outside the vocabulary")
    inputs = [vocab.sos] + list(labels)
    targets = np.array(list(labels) + [vocab.eos])
    x = lm.embed[np.array(inputs)]
    for cell in lm.cells:
        x = cell.sequence(x)
    log_dist = nt.log_softmax(lm.output(x), axis=-1)
    return nt.neg(nt.sum(log_dist[np.arange(len(targets)), targets]))


def batch_nll(lm: CharRnnLm, batch: Sequence[Sequence[int]]) -> Tensor:
    """Summed -log p(labels, eos) over a batch, run zero-padded in one pass."""
    vocab = lm.vocab
    for labels in batch:
        if any(not 0 <= c < vocab.n_labels for c in labels):
            raise ValueError("batch_nll: label outside the vocabulary")
    n_b = len(batch)
    n_steps = max(len(x) for x in batch) + 1
    targets = np.full((n_b, n_steps), vocab.eos)
    valid = np.zeros((n_b, n_steps), dtype=bool)
    for b, labels in enumerate(batch):
        targets[b, : len(labels)] = labels
        valid[b, : len(labels) + 1] = True
    inputs = np.concatenate([np.full((n_b, 1), vocab.sos), targets[:, :-1]], axis=1)
    x = lm.embed[inputs]  # (B, L, E)
    for cell in lm.cells:
        x = cell.sequence(x)
    log_dist = nt.log_softmax(lm.output(x), axis=-1)
    bi, li = np.nonzero(valid)
    return nt.neg(nt.sum(log_dist[bi, li, targets[bi, li]]))


def sequence_log_prob(lm: CharRnnLm, labels: Sequence[int]) -> float:
    """Chained :func:`lm_step` evaluation of log p(labels, eos)."""
    state = lm.initial_state()
    total = 0.0
    prev = lm.vocab.sos
    for c in list(labels) + [lm.vocab.eos]:
        log_dist, state = lm_step(lm, state, prev)
        total += float(log_dist[c])
        prev = c
    return total


@dataclass
class LmTrainConfig:
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 5.0
    optimizer: OptimizerSpec = field(default_factory=lambda: OptimizerSpec(ADAM, 1e-2))


@dataclass
class LmEpoch:
    epoch: int
    train_loss: float
    dev_perplexity: float


def perplexity(lm: CharRnnLm, texts: Sequence[Sequence[int]]) -> float:
    """exp of the mean per-symbol negative log-likelihood (eos counted)."""
    total = 0.0
    count = 0
    with nt.no_grad():
        for start in range(0, len(texts), 64):
            chunk = texts[start : start + 64]
            total += float(batch_nll(lm, chunk).data)
            count += sum(len(x) + 1 for x in chunk)
    return math.exp(total / count)


def lm_train(
    texts: Sequence[str],
    vocab: Vocabulary,
    cfg: LmTrainConfig | None = None,
    arch: LmArch | None = None,
    dev_texts: Sequence[str] | None = None,
    on_epoch: Callable[[LmEpoch], None] | None = None,
) -> tuple[CharRnnLm, list[LmEpoch]]:
    """Train on ``texts`` (next-character cross-entropy); returns the model and per-epoch history.

    Validation perplexity is measured on ``dev_texts`` (the training texts when omitted).
    Raises :class:`~hybridasr.data.VocabularyError` on characters outside ``vocab``.
    """
    cfg = cfg or LmTrainConfig()
    if not texts:
        raise ValueError("lm_train: empty corpus")
    train_ids = [vocab.encode(t) for t in texts]
    dev_ids = [vocab.encode(t) for t in dev_texts] if dev_texts else train_ids
    lm = CharRnnLm(vocab, arch, seed=cfg.seed)
    opt = Optimizer(cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    params = dict(lm.named_parameters())
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ids))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_ids[k] for k in order[start : start + cfg.batch_size]]
            n_sym = sum(len(b) + 1 for b in batch)
            loss = nt.scale(batch_nll(lm, batch), 1.0 / n_sym)
            grads = nt.backward(loss)
            lm.zero_grad()
            named = {k: grads[p] for k, p in params.items() if p in grads}
            clip_grad_norm(named, cfg.grad_clip)
            if opt.step({k: params[k].data for k in named}, named):
                losses.append(float(loss.data))
            else:
                log.warning("LM epoch %d: non-finite gradient, batch skipped", epoch)
        rec = LmEpoch(epoch, float(np.mean(losses)) if losses else float("nan"), perplexity(lm, dev_ids))
        log.info("LM epoch %d loss %.4f dev ppl %.4f", rec.epoch, rec.train_loss, rec.dev_perplexity)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return lm, history
