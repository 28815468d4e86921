"""Location-aware attention and the single-layer LSTM attention decoder."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as nt
from .layers import Linear, LSTMCell, Module, uniform
from .tensor import ShapeError, Tensor


class LocationAttention(Module):
    """e_t = g . tanh(W_q q + W_h h_t + W_f f_t + b), with f = K * a_prev."""

    def __init__(self, eprojs: int, dunits: int, att_dim: int, channels: int, width: int, rng: np.random.Generator):
        self.kernel = uniform(rng, (channels, width))
        self.w_q = Linear(dunits, att_dim, rng, bias=False)
        self.w_h = Linear(eprojs, att_dim, rng, bias=False)
        self.w_f = Linear(channels, att_dim, rng, bias=True)
        self.g = uniform(rng, (att_dim,))

    def project_encoder(self, hs: Tensor) -> Tensor:
        """W_h h_t for every frame; computed once per utterance."""
        return self.w_h(hs)

    def energies(self, a_prev: Tensor, q_prev: Tensor, hs_proj: Tensor) -> Tensor:
        f = nt.conv1d_same(a_prev, self.kernel)  # (T, C)
        bias = nt.add(self.w_f.bias, nt.matmul(self.w_q.weight, q_prev))
        pre = nt.add(hs_proj, nt.linear(f, self.w_f.weight, bias))
        return nt.matmul(nt.tanh(pre), self.g)

    # -------- batched inference (no tape)

    def conv_numpy(self, a_prev: np.ndarray) -> np.ndarray:
        """(B, T) -> (B, T, C)."""
        width = self.kernel.shape[1]
        left = (width - 1) // 2
        padded = np.pad(a_prev, ((0, 0), (left, width - 1 - left)))
        cols = sliding_window_view(padded, width, axis=1)  # (B, T, W)
        return cols @ self.kernel.data.T

    def attend_numpy(self, a_prev: np.ndarray, q_prev: np.ndarray, hs_proj: np.ndarray) -> np.ndarray:
        f = self.conv_numpy(a_prev)
        pre = hs_proj[None] + f @ self.w_f.weight.data.T + self.w_f.bias.data + (q_prev @ self.w_q.weight.data.T)[:, None, :]
        e = np.tanh(pre) @ self.g.data  # (B, T)
        e = e - e.max(axis=1, keepdims=True)
        w = np.exp(e)
        return w / w.sum(axis=1, keepdims=True)


def attend(params: LocationAttention, a_prev: Tensor, q_prev: Tensor, hs: Tensor, hs_proj: Tensor | None = None) -> Tensor:
    """Attention weights a_l over the T encoder frames (a point on the simplex)."""
    if hs.ndim != 2 or hs.shape[0] == 0:
        raise ShapeError(f"attend: encoder output must be non-empty (T, P), got {hs.shape}")
    if a_prev.shape != (hs.shape[0],):
        raise ShapeError(f"attend: a_prev has shape {a_prev.shape}, encoder has T={hs.shape[0]}")
    if hs_proj is None:
        hs_proj = params.project_encoder(hs)
    return nt.softmax(params.energies(a_prev, q_prev, hs_proj))


def context(a: Tensor, hs: Tensor) -> Tensor:
    """r_l = sum_t a_lt h_t."""
    return nt.matmul(a, hs)


def attend_batch(params: LocationAttention, a_prev: Tensor, q_prev: Tensor, hs_proj: Tensor, mask: np.ndarray) -> Tensor:
    """Padded-batch form of :func:`attend`: a_prev (B, T), q_prev (B, D), hs_proj (B, T, A).

    Weights at padded frames (``mask`` False) are exactly zero.
    """
    n_b, n_t, att_dim = hs_proj.shape
    if a_prev.shape != (n_b, n_t) or q_prev.ndim != 2 or q_prev.shape[0] != n_b:
        raise ShapeError(f"attend_batch: a_prev {a_prev.shape}, q_prev {q_prev.shape}, hs_proj {hs_proj.shape}")
    f = nt.conv1d_same(a_prev, params.kernel)  # (B, T, C)
    q_term = nt.reshape(nt.linear(q_prev, params.w_q.weight), (n_b, 1, att_dim))
    pre = nt.add(nt.add(hs_proj, params.w_f(f)), q_term)
    e = nt.linear(nt.tanh(pre), nt.reshape(params.g, (1, att_dim)))
    return nt.masked_softmax(nt.reshape(e, (n_b, n_t)), mask)


def context_batch(a: Tensor, hs: Tensor) -> Tensor:
    """(B, T) weights with (B, T, P) states -> (B, P)."""
    n_b, n_t = a.shape
    return nt.reshape(nt.bmm(nt.reshape(a, (n_b, 1, n_t)), hs), (n_b, hs.shape[2]))


class AttentionDecoder(Module):
    """Embedding, one LSTM layer over [embed(c_prev); r_l], and the output projection."""

    def __init__(self, n_inputs: int, n_outputs: int, embed_dim: int, eprojs: int, dunits: int, rng: np.random.Generator):
        self.n_outputs = n_outputs
        self.embed = uniform(rng, (n_inputs, embed_dim))
        self.cell = LSTMCell(embed_dim + eprojs, dunits, rng)
        self.output = Linear(dunits, n_outputs, rng)

    @property
    def dunits(self) -> int:
        return self.cell.hidden

    def step_state(self, r: Tensor, q_prev: Tensor, c_prev: Tensor, label_prev) -> tuple[Tensor, Tensor]:
        """Advance the LSTM; ``label_prev`` is an id, or an id array for a (B, ...) batch."""
        ids = np.asarray(label_prev)
        if np.any(ids < 0) or np.any(ids >= self.embed.shape[0]):
            raise ValueError(f"decoder_step: unknown label id {label_prev}")
        x = nt.concat([self.embed[label_prev], r], axis=-1)
        return self.cell.step(x, q_prev, c_prev)

    def step_numpy(self, r: np.ndarray, q_prev: np.ndarray, c_prev: np.ndarray, labels_prev: np.ndarray):
        x = np.concatenate([self.embed.data[labels_prev], r], axis=1)
        q, c = self.cell.step_numpy(x, q_prev, c_prev)
        logits = q @ self.output.weight.data.T + self.output.bias.data
        m = logits.max(axis=1, keepdims=True)
        log_dist = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        return log_dist, q, c


def decoder_step(params: AttentionDecoder, r: Tensor, q_prev: Tensor, c_prev: Tensor, label_prev: int):
    """One decoder step: returns (log-distribution over next label incl. eos, q_l, cell state)."""
    q, c = params.step_state(r, q_prev, c_prev, label_prev)
    return nt.log_softmax(params.output(q)), q, c
