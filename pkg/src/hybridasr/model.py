"""Hybrid CTC/attention model: shared encoder, CTC head, attention decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as nt
from .attention import AttentionDecoder, LocationAttention, attend, attend_batch, context, context_batch
from .ctc import CTCHead, InfeasibleAlignment, ctc_loss, min_frames
from .data import Utterance, Vocabulary
from .layers import BLSTMP, INIT_SCALE, Module, VGGBlock, vgg_forward
from .tensor import Tensor

ENCODER, CTC, DECODER = "encoder", "ctc", "decoder"
GROUPS = (ENCODER, CTC, DECODER)


@dataclass
class ModelArch:
    """Architecture descriptor; defaults follow the reference configuration."""

    idim: int = 80
    frontend: str = "blstmp"  # "blstmp" or "vgg"
    elayers: int = 5
    eunits: int = 320
    eprojs: int = 320
    dunits: int = 300
    embed_dim: int = 300
    att_dim: int = 320
    aconv_chans: int = 10
    aconv_width: int = 100
    init_scale: float = 0.1

    def __post_init__(self):
        if self.frontend not in ("blstmp", "vgg"):
            raise ValueError(f"unknown frontend {self.frontend!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


class HybridModel(Module):
    def __init__(self, arch: ModelArch, vocab: Vocabulary, seed: int = 0):
        self.arch = arch
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        self.frontend = VGGBlock(rng) if arch.frontend == "vgg" else None
        enc_in = VGGBlock.output_dim(arch.idim) if arch.frontend == "vgg" else arch.idim
        self.encoder = BLSTMP(enc_in, arch.elayers, arch.eunits, arch.eprojs, rng)
        self.ctc = CTCHead(arch.eprojs, vocab.n_labels, rng)
        self.attention = LocationAttention(arch.eprojs, arch.dunits, arch.att_dim, arch.aconv_chans, arch.aconv_width, rng)
        self.decoder = AttentionDecoder(vocab.n_inputs, vocab.n_labels + 1, arch.embed_dim, arch.eprojs, arch.dunits, rng)
        if arch.init_scale != INIT_SCALE:
            for p in self.parameters():
                p.data *= arch.init_scale / INIT_SCALE

    # ---------------------------------------------------------------- parameter groups

    @staticmethod
    def group_of(name: str) -> str:
        head = name.split(".", 1)[0]
        if head in ("frontend", "encoder"):
            return ENCODER
        if head == "ctc":
            return CTC
        return DECODER

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {g: [] for g in GROUPS}
        for name, _ in self.named_parameters():
            out[self.group_of(name)].append(name)
        return out

    def set_trainable(self, groups: Sequence[str]) -> None:
        keep = set(groups)
        for name, p in self.named_parameters():
            p.requires_grad = self.group_of(name) in keep

    # ---------------------------------------------------------------- forward

    def encoder_frames(self, n_frames: int) -> int:
        return -(-n_frames // 4) if self.arch.frontend == "vgg" else n_frames

    def encode(self, xs) -> Tensor:
        return encode(self, xs)

    def ctc_log_probs(self, hs: Tensor) -> Tensor:
        return self.ctc.log_probs(hs)

    # ---------------------------------------------------------------- persistence

    def to_checkpoint(self, meta: dict | None = None) -> ckpt_io.Checkpoint:
        return ckpt_io.Checkpoint("hybrid", self.arch.to_dict(), self.vocab.to_list(), self.state_dict(), meta or {})

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        ckpt_io.save(path, self.to_checkpoint(meta))

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint) -> "HybridModel":
        if ck.kind != "hybrid":
            raise ckpt_io.CheckpointError(f"expected a hybrid model checkpoint, got {ck.kind!r}")
        model = cls(ModelArch.from_dict(ck.arch), Vocabulary.from_list(ck.vocab))
        model.load_state_dict(ck.params)
        return model

    @classmethod
    def load(cls, path: str | Path) -> "HybridModel":
        return cls.from_checkpoint(ckpt_io.load(path))


def encode(model: HybridModel, xs) -> Tensor:
    """h = Encoder(X): optional VGG front-end, then the BLSTMP stack."""
    h = xs if isinstance(xs, Tensor) else Tensor(xs)
    if model.frontend is not None:
        h = vgg_forward(model.frontend, h)
    return model.encoder(h)


@dataclass
class AttentionResult:
    loss: Tensor
    correct: int
    total: int


def attention_loss(model: HybridModel, hs: Tensor, labels: Sequence[int]) -> AttentionResult:
    """Teacher-forced -log p_att(C|X), eos term included."""
    vocab = model.vocab
    if any(not 0 <= c < vocab.n_labels for c in labels):
        raise ValueError("attention_forward: label outside the vocabulary")
    dec = model.decoder
    att = model.attention
    n_frames = hs.shape[0]
    hs_proj = att.project_encoder(hs)
    a = Tensor(np.full(n_frames, 1.0 / n_frames))
    q = Tensor(np.zeros(dec.dunits))
    c = Tensor(np.zeros(dec.dunits))
    prev = vocab.sos
    targets = list(labels) + [vocab.eos]
    states = []
    for target in targets:
        a = attend(att, a, q, hs, hs_proj)
        r = context(a, hs)
        q, c = dec.step_state(r, q, c, prev)
        states.append(q)
        prev = target
    log_dist = nt.log_softmax(dec.output(nt.stack(states)), axis=-1)  # (L+1, V+1)
    rows = np.arange(len(targets))
    picked = log_dist[rows, np.array(targets)]
    correct = int(np.sum(log_dist.data.argmax(axis=1) == np.array(targets)))
    return AttentionResult(nt.neg(nt.sum(picked)), correct, len(targets))


def attention_forward(model: HybridModel, utt: Utterance) -> Tensor:
    labels = model.vocab.encode(utt.transcript)
    return attention_loss(model, model.encode(utt.features), labels).loss


@dataclass
class LossBreakdown:
    total: Tensor
    ctc: Tensor | None
    att: Tensor | None
    hs: Tensor
    correct: int = 0
    count: int = 0


def ctc_feasible(model: HybridModel, utt: Utterance, labels: Sequence[int] | None = None) -> bool:
    if labels is None:
        labels = model.vocab.encode(utt.transcript)
    return model.encoder_frames(utt.n_frames) >= min_frames(labels)


def mol_losses(model: HybridModel, utt: Utterance, lam: float) -> LossBreakdown:
    """lam * CTC loss + (1 - lam) * attention loss over one shared encoder pass.

    Raises :class:`InfeasibleAlignment` when the CTC term is needed but the
    utterance is too short for its transcript.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    labels = model.vocab.encode(utt.transcript)
    if lam > 0.0 and not ctc_feasible(model, utt, labels):
        raise InfeasibleAlignment(f"{utt.id}: transcript too long for {utt.n_frames} frames")
    hs = model.encode(utt.features)
    l_ctc = ctc_loss(model.ctc_log_probs(hs), labels) if lam > 0.0 else None
    att = attention_loss(model, hs, labels) if lam < 1.0 else None
    l_att = att.loss if att is not None else None
    if l_ctc is None:
        total = l_att
    elif l_att is None:
        total = l_ctc
    else:
        total = nt.add(nt.scale(l_ctc, lam), nt.scale(l_att, 1.0 - lam))
    return LossBreakdown(total, l_ctc, l_att, hs, att.correct if att else 0, att.total if att else 0)


def mol_loss(model: HybridModel, utt: Utterance, lam: float) -> Tensor:
    return mol_losses(model, utt, lam).total


@dataclass
class BatchLoss:
    total: Tensor
    n_utts: int
    correct: int = 0
    count: int = 0


def pad_features(utts: Sequence[Utterance]) -> tuple[np.ndarray, list[int]]:
    lengths = [u.n_frames for u in utts]
    dim = utts[0].features.shape[1]
    out = np.zeros((len(utts), max(lengths), dim))
    for b, u in enumerate(utts):
        out[b, : u.n_frames] = u.features
    return out, lengths


def batch_losses(model: HybridModel, utts: Sequence[Utterance], lam: float) -> BatchLoss:
    """Mean multi-objective loss over the CTC-feasible utterances of ``utts``.

    The BLSTMP path runs the whole batch zero-padded in one pass; the result
    equals the mean of per-utterance :func:`mol_loss` values up to rounding.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    vocab = model.vocab
    keep, label_lists = [], []
    for u in utts:
        labels = vocab.encode(u.transcript)
        if lam > 0.0 and not ctc_feasible(model, u, labels):
            continue
        keep.append(u)
        label_lists.append(labels)
    if not keep:
        raise InfeasibleAlignment("no feasible utterance in batch")
    if model.frontend is not None:
        total = mol_loss(model, keep[0], lam)
        for u in keep[1:]:
            total = nt.add(total, mol_loss(model, u, lam))
        return BatchLoss(nt.scale(total, 1.0 / len(keep)), len(keep))

    feats, lengths = pad_features(keep)
    n_b, n_t = feats.shape[:2]
    hs = model.encoder(Tensor(feats), lengths)
    terms = []
    correct = count = 0
    if lam > 0.0:
        lp = model.ctc_log_probs(hs)
        l_ctc = None
        for b, labels in enumerate(label_lists):
            term = ctc_loss(lp[b, : lengths[b]], labels)
            l_ctc = term if l_ctc is None else nt.add(l_ctc, term)
        terms.append(nt.scale(l_ctc, lam))
    if lam < 1.0:
        att = model.attention
        dec = model.decoder
        mask = np.arange(n_t)[None, :] < np.array(lengths)[:, None]
        hs_proj = att.project_encoder(hs)
        a = Tensor(mask / np.array(lengths, dtype=np.float64)[:, None])
        q = Tensor(np.zeros((n_b, dec.dunits)))
        c = Tensor(np.zeros((n_b, dec.dunits)))
        n_steps = max(len(x) for x in label_lists) + 1
        targets = np.full((n_b, n_steps), vocab.eos)
        valid = np.zeros((n_b, n_steps), dtype=bool)
        for b, labels in enumerate(label_lists):
            targets[b, : len(labels)] = labels
            valid[b, : len(labels) + 1] = True
        inputs = np.concatenate([np.full((n_b, 1), vocab.sos), targets[:, :-1]], axis=1)
        states = []
        for step in range(n_steps):
            a = attend_batch(att, a, q, hs_proj, mask)
            q, c = dec.step_state(context_batch(a, hs), q, c, inputs[:, step])
            states.append(q)
        log_dist = nt.log_softmax(dec.output(nt.stack(states)), axis=-1)  # (L, B, V+1)
        bi, li = np.nonzero(valid)
        picked = log_dist[li, bi, targets[bi, li]]
        correct = int(np.sum(log_dist.data[li, bi].argmax(axis=1) == targets[bi, li]))
        count = len(li)
        terms.append(nt.scale(nt.neg(nt.sum(picked)), 1.0 - lam))
    total = terms[0] if len(terms) == 1 else nt.add(terms[0], terms[1])
    return BatchLoss(nt.scale(total, 1.0 / n_b), n_b, correct, count)


def batch_loss(model: HybridModel, utts: Sequence[Utterance], lam: float) -> Tensor:
    return batch_losses(model, utts, lam).total
