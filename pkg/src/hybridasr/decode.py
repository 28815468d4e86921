"""Label-synchronous joint CTC/attention beam search with optional LM shallow fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as nt
from .ctc import NEG_INF, ctc_greedy_path, extend_prefixes
from .data import Utterance
from .lm import CharRnnLm, LmState
from .model import HybridModel
from .tensor import Tensor

log = logging.getLogger(__name__)

HYP_HEADER = ("id", "text", "score", "score_att", "score_ctc", "score_lm")


class VocabularyMismatch(ValueError):
    pass


@dataclass
class DecodeConfig:
    beam: int = 20
    alpha: float = 0.3  # CTC weight
    beta: float = 0.0  # LM weight
    max_len_ratio: float = 1.0
    max_len: int | None = None  # absolute cap; overrides the ratio when set

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")
        if self.max_len_ratio <= 0.0:
            raise ValueError("max_len_ratio must be positive")
        if self.max_len is not None and self.max_len < 0:
            raise ValueError("max_len must be >= 0")

    def length_cap(self, n_frames: int) -> int:
        if self.max_len is not None:
            return self.max_len
        return max(1, int(self.max_len_ratio * n_frames))


@dataclass
class BeamHypothesis:
    """Cumulative component log-scores of one hypothesis.

    A component whose weight is zero is not evaluated and stays 0.0.
    """

    labels: tuple[int, ...]
    score_att: float = 0.0
    score_ctc: float = 0.0
    score_lm: float = 0.0
    att_state: tuple[np.ndarray, np.ndarray] | None = None
    ctc_state: tuple[np.ndarray, np.ndarray] | None = None
    lm_state: LmState | None = None
    finished: bool = False
    total: float = 0.0


def fused_score(h: BeamHypothesis, cfg: DecodeConfig) -> float:
    """(1 - alpha) * att + alpha * ctc + beta * lm; zero-weight terms are dropped."""
    total = 0.0
    if cfg.alpha < 1.0:
        total += (1.0 - cfg.alpha) * h.score_att
    if cfg.alpha > 0.0:
        total += cfg.alpha * h.score_ctc
    if cfg.beta > 0.0:
        total += cfg.beta * h.score_lm
    return total


@dataclass
class DecodeResult:
    hyps: list[BeamHypothesis]
    warning: bool = False
    trace: list[dict] = field(default_factory=list)

    @property
    def best(self) -> BeamHypothesis:
        return self.hyps[0]


def _rank(h: BeamHypothesis):
    return (-h.total, h.labels)


def check_lm(model: HybridModel, lm: CharRnnLm | None) -> None:
    if lm is not None and lm.vocab != model.vocab:
        raise VocabularyMismatch("LM and model vocabularies differ")


def _encode_numpy(model: HybridModel, xs: np.ndarray):
    with nt.no_grad():
        hs = model.encode(Tensor(np.asarray(xs, dtype=np.float64)))
        lp = model.ctc_log_probs(hs).data
        hs_proj = model.attention.project_encoder(hs).data
    return hs.data, hs_proj, lp


def joint_beam_search(
    model: HybridModel, xs: np.ndarray, cfg: DecodeConfig | None = None, lm: CharRnnLm | None = None, trace: bool = False
) -> DecodeResult:
    """Search for argmax_C of the fused score.

    Each step extends every live hypothesis by every label and eos, keeps the
    ``beam`` best candidates, and moves those ending in eos to the finished
    pool (also capped at ``beam``). Ties break lexicographically on the label
    sequence. The search stops once no live hypothesis can beat the best
    finished one (every per-step increment is <= 0), when the beam empties, or
    at the length cap, where only eos may be chosen.
    """
    cfg = cfg or DecodeConfig()
    if cfg.beta > 0.0 and lm is None:
        raise ValueError("lm weight > 0 requires a language model")
    check_lm(model, lm)
    if np.asarray(xs).ndim != 2 or len(xs) == 0:
        raise ValueError("joint_beam_search: features must be a non-empty (T, D) matrix")
    use_ctc = cfg.alpha > 0.0
    use_lm = cfg.beta > 0.0
    w_att = 1.0 - cfg.alpha
    vocab = model.vocab
    n_lab = vocab.n_labels
    eos = vocab.eos
    hs, hs_proj, lp = _encode_numpy(model, xs)
    n_frames = hs.shape[0]
    max_len = cfg.length_cap(n_frames)

    labels: list[tuple[int, ...]] = [()]
    a = np.full((1, n_frames), 1.0 / n_frames)
    q = np.zeros((1, model.decoder.dunits))
    c = np.zeros_like(q)
    last = np.array([vocab.sos])
    s_att = np.zeros(1)
    s_ctc = np.zeros(1)
    s_lm = np.zeros(1)
    r_b = np.cumsum(lp[:, -1])[None]
    r_nb = np.full((1, n_frames), NEG_INF)
    lm_state = lm.initial_state(1) if use_lm else None
    finished: list[BeamHypothesis] = []
    steps: list[dict] = []

    for step in range(max_len + 1):
        n_live = len(labels)
        a_new = model.attention.attend_numpy(a, q, hs_proj)
        att_lp, q_new, c_new = model.decoder.step_numpy(a_new @ hs, q, c, last)
        cand_att = s_att[:, None] + att_lp
        total = w_att * cand_att
        if use_ctc:
            empty = np.array([not lab for lab in labels])
            prev = np.array([lab[-1] if lab else -1 for lab in labels])
            psi, new_nb, new_b = extend_prefixes(lp, r_nb, r_b, prev, empty)
            complete = np.logaddexp(r_nb[:, -1], r_b[:, -1])
            cand_ctc = np.concatenate([psi, complete[:, None]], axis=1)
            total = total + cfg.alpha * cand_ctc
        if use_lm:
            lm_lp, lm_new = lm.step_numpy(lm_state, last)
            cand_lm = s_lm[:, None] + lm_lp
            total = total + cfg.beta * cand_lm
        if step == max_len:
            total[:, :n_lab] = NEG_INF

        flat = total.ravel()
        ok = np.flatnonzero(np.isfinite(flat))
        parent_rank = np.empty(n_live, dtype=np.int64)
        parent_rank[sorted(range(n_live), key=labels.__getitem__)] = np.arange(n_live)
        par = ok // (n_lab + 1)
        lab = ok % (n_lab + 1)
        chosen = ok[np.lexsort((lab, parent_rank[par], -flat[ok]))[: cfg.beam]]

        keep_par, keep_lab = [], []
        for idx in chosen:
            p, k = divmod(int(idx), n_lab + 1)
            if k == eos:
                h = BeamHypothesis(
                    labels[p],
                    float(cand_att[p, k]),
                    float(cand_ctc[p, k]) if use_ctc else 0.0,
                    float(cand_lm[p, k]) if use_lm else 0.0,
                    att_state=(a_new[p].copy(), q_new[p].copy()),
                    finished=True,
                )
                h.total = fused_score(h, cfg)
                finished.append(h)
            else:
                keep_par.append(p)
                keep_lab.append(k)
        finished.sort(key=_rank)
        del finished[cfg.beam :]
        if trace:
            steps.append(
                {
                    "step": step,
                    "live": [labels[p] + (k,) for p, k in zip(keep_par, keep_lab)],
                    "finished": [h.labels for h in finished],
                }
            )
        if not keep_par:
            labels = []
            break
        rows = np.array(keep_par)
        cols = np.array(keep_lab)
        labels = [labels[p] + (k,) for p, k in zip(keep_par, keep_lab)]
        a, q, c = a_new[rows], q_new[rows], c_new[rows]
        last = cols
        s_att = cand_att[rows, cols]
        if use_ctc:
            s_ctc = cand_ctc[rows, cols]
            r_nb = new_nb[rows, :, cols]
            r_b = new_b[rows, :, cols]
        if use_lm:
            s_lm = cand_lm[rows, cols]
            lm_state = lm_new.select(rows)
        if finished and total[rows, cols].max() < finished[0].total:
            break

    if finished:
        return DecodeResult(finished, False, steps)
    log.warning("no hypothesis reached eos within %d labels", max_len)
    live = []
    for i, lab_seq in enumerate(labels):
        h = BeamHypothesis(lab_seq, float(s_att[i]), float(s_ctc[i]) if use_ctc else 0.0, float(s_lm[i]) if use_lm else 0.0)
        h.total = fused_score(h, cfg)
        live.append(h)
    live.sort(key=_rank)
    return DecodeResult(live, True, steps)


def greedy_attention(model: HybridModel, xs: np.ndarray, max_len: int | None = None, max_len_ratio: float = 1.0) -> BeamHypothesis:
    """Attention-only argmax decoding (first index wins ties)."""
    hs, hs_proj, _ = _encode_numpy(model, xs)
    n_frames = hs.shape[0]
    cap = max_len if max_len is not None else max(1, int(max_len_ratio * n_frames))
    vocab = model.vocab
    a = np.full((1, n_frames), 1.0 / n_frames)
    q = np.zeros((1, model.decoder.dunits))
    c = np.zeros_like(q)
    prev = vocab.sos
    out: list[int] = []
    score = 0.0
    for step in range(cap + 1):
        a = model.attention.attend_numpy(a, q, hs_proj)
        log_dist, q, c = model.decoder.step_numpy(a @ hs, q, c, np.array([prev]))
        row = log_dist[0]
        k = vocab.eos if step == cap else int(np.argmax(row))
        score += float(row[k])
        if k == vocab.eos:
            break
        out.append(k)
        prev = k
    h = BeamHypothesis(tuple(out), score_att=score, finished=True)
    h.total = score
    return h


def ctc_greedy(model: HybridModel, xs: np.ndarray) -> list[int]:
    """Per-frame CTC argmax, repeats collapsed, blanks removed."""
    _, _, lp = _encode_numpy(model, xs)
    return ctc_greedy_path(lp)


# ---------------------------------------------------------------- corpus decoding and records


@dataclass
class HypothesisRecord:
    id: str
    text: str
    score: float
    score_att: float
    score_ctc: float
    score_lm: float
    warning: bool = False


def decode_utterances(
    model: HybridModel, utts: Iterable[Utterance], cfg: DecodeConfig | None = None, lm: CharRnnLm | None = None
) -> list[HypothesisRecord]:
    cfg = cfg or DecodeConfig()
    out = []
    for u in utts:
        res = joint_beam_search(model, u.features, cfg, lm)
        b = res.best
        out.append(HypothesisRecord(u.id, model.vocab.decode(b.labels), b.total, b.score_att, b.score_ctc, b.score_lm, res.warning))
    return out


def write_hypotheses(path: str | Path, records: Sequence[HypothesisRecord]) -> None:
    """Tab-separated, header line first; scores are written with full float precision."""
    lines = ["\t".join(HYP_HEADER)]
    for r in records:
        if "\t" in r.text or "\n" in r.text:
            raise ValueError(f"{r.id}: hypothesis text contains a tab or newline")
        lines.append("\t".join([r.id, r.text] + [repr(float(x)) for x in (r.score, r.score_att, r.score_ctc, r.score_lm)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_hypotheses(path: str | Path) -> list[HypothesisRecord]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or tuple(lines[0].split("\t")) != HYP_HEADER:
        raise ValueError(f"{path}: missing hypothesis header")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(HYP_HEADER):
            raise ValueError(f"{path}:{n}: expected {len(HYP_HEADER)} fields, got {len(parts)}")
        out.append(HypothesisRecord(parts[0], parts[1], *map(float, parts[2:])))
    return out

