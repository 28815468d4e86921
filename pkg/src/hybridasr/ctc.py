"""CTC likelihood, an enumeration oracle, and label-synchronous prefix scoring.

Label ids are ``0..V-1``; the blank is id ``V`` (the last column of the
``(T, V+1)`` log-probability matrix).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import Linear, Module
from .tensor import ShapeError, Tensor, log_softmax, primitive

NEG_INF = -np.inf
BRUTE_FORCE_LIMIT = 10**6


class InfeasibleAlignment(ValueError):
    """The label sequence needs more frames than the input provides."""


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: one frame each plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def _extended(labels: Sequence[int], blank: int) -> tuple[np.ndarray, np.ndarray]:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def ctc_alpha_beta(log_probs: np.ndarray, labels: Sequence[int]):
    """Log-space forward and backward variables over the blank-augmented labels.

    Both alpha[t, s] and beta[t, s] include the emission at frame t.
    Returns ``(alpha, beta, log_p)``.
    """
    n_frames, n_sym = log_probs.shape
    blank = n_sym - 1
    ext, skip = _extended(labels, blank)
    n_states = ext.size
    emit = log_probs[:, ext]
    alpha = np.full((n_frames, n_states), NEG_INF)
    beta = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if n_states > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        for t in range(1, n_frames):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
            alpha[t] = acc + emit[t]
        beta[-1, -1] = emit[-1, -1]
        if n_states > 1:
            beta[-1, -2] = emit[-1, -2]
        for t in range(n_frames - 2, -1, -1):
            nxt = beta[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            beta[t] = acc + emit[t]
        tail = alpha[-1, -2:] if n_states > 1 else alpha[-1, -1:]
        log_p = float(np.logaddexp.reduce(tail))
    return alpha, beta, log_p


def ctc_log_likelihood(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """log p_ctc(labels | X); -inf when no alignment fits."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    if log_probs.shape[0] < min_frames(labels):
        return NEG_INF
    return ctc_alpha_beta(log_probs, labels)[2]


def ctc_loss(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Negative CTC log-likelihood of ``labels`` given per-frame log-distributions.

    Raises :class:`InfeasibleAlignment` when ``T`` is shorter than the minimum
    alignment length, so callers can skip the utterance explicitly.
    """
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss: expected (T, V+1) log-probs, got {log_probs.shape}")
    labels = [int(c) for c in labels]
    n_frames, n_sym = log_probs.shape
    if any(c < 0 or c >= n_sym - 1 for c in labels):
        raise ValueError(f"ctc_loss: label outside [0, {n_sym - 1})")
    need = min_frames(labels)
    if n_frames < need:
        raise InfeasibleAlignment(f"{len(labels)} labels need {need} frames, got {n_frames}")
    lp = log_probs.data
    alpha, beta, log_p = ctc_alpha_beta(lp, labels)
    ext, _ = _extended(labels, n_sym - 1)

    def bw(g):
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - lp[:, ext] - log_p)
        occ = np.nan_to_num(occ, nan=0.0)
        grad = np.zeros_like(lp)
        np.add.at(grad, (slice(None), ext), occ)
        return (-g * grad,)

    return primitive(np.asarray(-log_p), (log_probs,), bw, "ctc_loss")


# ---------------------------------------------------------------- enumeration oracle


def _all_paths(n_frames: int, n_sym: int) -> np.ndarray:
    if n_sym**n_frames > BRUTE_FORCE_LIMIT:
        raise ValueError(f"ctc_brute_force: {n_sym}^{n_frames} paths exceeds {BRUTE_FORCE_LIMIT}")
    grids = np.indices((n_sym,) * n_frames).reshape(n_frames, -1).T
    return grids


def _collapse_keep(paths: np.ndarray, blank: int) -> np.ndarray:
    keep = paths != blank
    keep[:, 1:] &= paths[:, 1:] != paths[:, :-1]
    return keep


def ctc_brute_force(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """p_ctc(labels | X) by summing every frame-level path that collapses to ``labels``."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_sym = log_probs.shape
    blank = n_sym - 1
    labels = np.asarray(labels, dtype=np.int64)
    paths = _all_paths(n_frames, n_sym)
    keep = _collapse_keep(paths, blank)
    count = keep.sum(axis=1)
    ok = count == labels.size
    if labels.size:
        rank = np.clip(np.cumsum(keep, axis=1) - 1, 0, labels.size - 1)
        ok &= ~np.any(keep & (paths != labels[rank]), axis=1)
    probs = np.exp(log_probs).T  # (V+1, T)
    path_p = np.prod(probs[paths, np.arange(n_frames)], axis=1)
    return float(path_p[ok].sum())


def ctc_brute_force_all(log_probs: np.ndarray) -> dict[tuple[int, ...], float]:
    """Probability of every collapsed label sequence, by enumeration."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_sym = log_probs.shape
    blank = n_sym - 1
    paths = _all_paths(n_frames, n_sym)
    keep = _collapse_keep(paths, blank)
    probs = np.exp(log_probs).T
    path_p = np.prod(probs[paths, np.arange(n_frames)], axis=1)
    out: dict[tuple[int, ...], float] = {}
    for row, k, p in zip(paths, keep, path_p):
        key = tuple(int(v) for v in row[k])
        out[key] = out.get(key, 0.0) + float(p)
    return out


def label_sequences(n_labels: int, max_len: int):
    """All label sequences of length 0..max_len in length-then-lexicographic order."""
    for length in range(max_len + 1):
        yield from itertools.product(range(n_labels), repeat=length)


# ---------------------------------------------------------------- prefix scoring


@dataclass(frozen=True)
class PrefixState:
    """Per-frame log-probabilities of ``prefix`` ending in a non-blank / blank at frame t."""

    prefix: tuple[int, ...]
    r_nonblank: np.ndarray
    r_blank: np.ndarray
    log_psi: float

    @property
    def log_complete(self) -> float:
        """log p_ctc(prefix as a whole sequence)."""
        return float(np.logaddexp(self.r_nonblank[-1], self.r_blank[-1]))


def initial_prefix_state(log_probs: np.ndarray) -> PrefixState:
    lp = np.asarray(log_probs, dtype=np.float64)
    r_b = np.cumsum(lp[:, -1])
    r_nb = np.full(lp.shape[0], NEG_INF)
    return PrefixState((), r_nb, r_b, 0.0)


def extend_prefixes(
    log_probs: np.ndarray, r_nonblank: np.ndarray, r_blank: np.ndarray, last: np.ndarray, empty: np.ndarray
):
    """Extend a batch of prefixes by every label at once.

    ``r_nonblank``/``r_blank`` are (B, T); ``last`` (B,) is each prefix's final
    label (ignored where ``empty``). Returns ``(psi, new_nb, new_b)`` with
    shapes (B, V) and (B, T, V).
    """
    lp = log_probs
    n_frames = lp.shape[0]
    n_labels = lp.shape[1] - 1
    batch = r_nonblank.shape[0]
    x_c = lp[:, :n_labels]  # (T, V)
    x_b = lp[:, n_labels]  # (T,)
    same = np.arange(n_labels)[None, :] == np.asarray(last)[:, None]  # (B, V)
    same &= ~np.asarray(empty)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(
            same[:, None, :],
            r_blank[:, :, None],
            np.logaddexp(r_blank, r_nonblank)[:, :, None],
        )  # (B, T, V)
        new_nb = np.full((batch, n_frames, n_labels), NEG_INF)
        new_b = np.full((batch, n_frames, n_labels), NEG_INF)
        new_nb[:, 0, :] = np.where(np.asarray(empty)[:, None], x_c[0][None, :], NEG_INF)
        for t in range(1, n_frames):
            new_nb[:, t] = np.logaddexp(new_nb[:, t - 1], phi[:, t - 1]) + x_c[t]
            new_b[:, t] = np.logaddexp(new_b[:, t - 1], new_nb[:, t - 1]) + x_b[t]
        if n_frames > 1:
            terms = np.concatenate([new_nb[:, :1], phi[:, :-1] + x_c[1:][None]], axis=1)
        else:
            terms = new_nb[:, :1]
        psi = _lse(terms, axis=1)
    return psi, new_nb, new_b


def ctc_prefix_score(
    state: PrefixState, prefix: Sequence[int], next_label: int, log_probs: np.ndarray, eos: int | None = None
) -> tuple[float, PrefixState]:
    """log CTC prefix probability of ``prefix + [next_label]`` and the extended state.

    When ``next_label == eos`` the score is the probability of ``prefix`` as a
    complete sequence and the state is returned unchanged.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n_labels = lp.shape[1] - 1
    if tuple(prefix) != state.prefix:
        raise ValueError(f"prefix state mismatch: state holds {state.prefix}, got {tuple(prefix)}")
    if eos is None:
        eos = n_labels
    if next_label == eos:
        return state.log_complete, state
    if not 0 <= next_label < n_labels:
        raise ValueError(f"label {next_label} is not a non-blank CTC label")
    last = state.prefix[-1] if state.prefix else -1
    psi, nb, b = extend_prefixes(
        lp, state.r_nonblank[None], state.r_blank[None], np.array([last]), np.array([not state.prefix])
    )
    score = float(psi[0, next_label])
    new = PrefixState(state.prefix + (int(next_label),), nb[0, :, next_label].copy(), b[0, :, next_label].copy(), score)
    return score, new


def prefix_probability(log_probs: np.ndarray, prefix: Sequence[int]) -> float:
    """log CTC prefix probability of ``prefix`` by chaining :func:`ctc_prefix_score`."""
    state = initial_prefix_state(log_probs)
    done: list[int] = []
    score = 0.0
    for c in prefix:
        score, state = ctc_prefix_score(state, done, c, log_probs)
        done.append(c)
    return score


def ctc_greedy_path(log_probs: np.ndarray) -> list[int]:
    """Frame-wise argmax, repeats collapsed, blanks removed."""
    lp = np.asarray(log_probs)
    blank = lp.shape[1] - 1
    best = lp.argmax(axis=1)
    out = []
    prev = -1
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


class CTCHead(Module):
    """Projection from encoder states to label + blank logits (blank last)."""

    def __init__(self, eprojs: int, n_labels: int, rng: np.random.Generator):
        self.n_labels = n_labels
        self.proj = Linear(eprojs, n_labels + 1, rng)

    def log_probs(self, hs: Tensor) -> Tensor:
        return log_softmax(self.proj(hs), axis=-1)


def log_prob_empty(log_probs: np.ndarray) -> float:
    return float(np.sum(np.asarray(log_probs)[:, -1]))

