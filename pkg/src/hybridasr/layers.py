"""Linear maps, LSTM recurrences, the BLSTMP encoder stack and the VGG front-end."""

from __future__ import annotations

import functools
from typing import Iterator, Sequence

import numpy as np

from . import tensor as nt
from .tensor import ShapeError, Tensor, primitive

INIT_SCALE = 0.1


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            if p.shape != state[k].shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {state[k].shape}")
            p.data = np.array(state[k], dtype=np.float64)


def uniform(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)


class Linear(Module):
    """Lin(x) = W x, or LinB(x) = W x + b when ``bias`` is set."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform(rng, (n_out, n_in))
        self.bias = uniform(rng, (n_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nt.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------- LSTM


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_gates(z: np.ndarray, hidden: int):
    i = _sigmoid(z[..., :hidden])
    f = _sigmoid(z[..., hidden : 2 * hidden])
    g = np.tanh(z[..., 2 * hidden : 3 * hidden])
    o = _sigmoid(z[..., 3 * hidden :])
    return i, f, g, o


class LSTMCell(Module):
    """Standard LSTM with gate blocks ordered (input, forget, candidate, output)."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_x = uniform(rng, (4 * hidden, n_in))
        self.w_h = uniform(rng, (4 * hidden, hidden))
        self.bias = uniform(rng, (4 * hidden,))

    @property
    def n_in(self) -> int:
        return self.w_x.shape[1]

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        hc = lstm_cell(x, h, c, self.w_x, self.w_h, self.bias)
        if hc.ndim == 1:
            return hc[: self.hidden], hc[self.hidden :]
        return hc[:, : self.hidden], hc[:, self.hidden :]

    def sequence(self, xs: Tensor, reverse: bool = False) -> Tensor:
        return lstm_sequence(xs, self.w_x, self.w_h, self.bias, reverse=reverse)

    def step_numpy(self, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        """Inference-only step; x, h, c may carry a leading batch axis."""
        z = x @ self.w_x.data.T + h @ self.w_h.data.T + self.bias.data
        i, f, g, o = lstm_gates(z, self.hidden)
        c_new = f * c + i * g
        return o * np.tanh(c_new), c_new


def lstm_step(cell: LSTMCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    return cell.step(x_t, h_prev, c_prev)


@functools.lru_cache(maxsize=None)
def _gate_scale(hidden: int) -> np.ndarray:
    scale = np.full(4 * hidden, 0.5)
    scale[2 * hidden : 3 * hidden] = 1.0
    return scale


def _gate_forward(z: np.ndarray, hidden: int) -> np.ndarray:
    """Activated gates [i, f, g, o] in one array: sigmoid(x) = (1 + tanh(x / 2)) / 2, tanh on the candidate block."""
    t = np.tanh(z * _gate_scale(hidden))
    act = 0.5 * t + 0.5
    act[..., 2 * hidden : 3 * hidden] = t[..., 2 * hidden : 3 * hidden]
    return act


def _gate_backward(act: np.ndarray, dc: np.ndarray, dh: np.ndarray, tc: np.ndarray, c_prev: np.ndarray, hidden: int):
    """d(pre-activations) given the cell-state and output gradients of one step."""
    i = act[..., :hidden]
    f = act[..., hidden : 2 * hidden]
    g = act[..., 2 * hidden : 3 * hidden]
    o = act[..., 3 * hidden :]
    dz = np.empty_like(act)
    dz[..., :hidden] = dc * g
    dz[..., hidden : 2 * hidden] = dc * c_prev
    dz[..., 2 * hidden : 3 * hidden] = dc * i
    dz[..., 3 * hidden :] = dh * tc
    deriv = act * (1.0 - act)
    deriv[..., 2 * hidden : 3 * hidden] = 1.0 - g * g
    dz *= deriv
    return dz, f, o


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor) -> Tensor:
    """One fused LSTM step; returns [h_new, c_new] concatenated on the last axis.

    ``x``, ``h``, ``c`` are vectors, or matrices with a leading batch axis.
    """
    hidden = w_h.shape[1]
    lead = x.shape[:-1]
    if (
        x.ndim not in (1, 2)
        or x.shape[-1] != w_x.shape[1]
        or h.shape != lead + (hidden,)
        or c.shape != lead + (hidden,)
        or w_x.shape[0] != 4 * hidden
        or w_h.shape != (4 * hidden, hidden)
        or bias.shape != (4 * hidden,)
    ):
        raise ShapeError(
            f"lstm_cell: incompatible shapes x={x.shape} h={h.shape} c={c.shape} "
            f"w_x={w_x.shape} w_h={w_h.shape} b={bias.shape}"
        )
    xd, hd, cd = x.data, h.data, c.data
    act = _gate_forward(xd @ w_x.data.T + hd @ w_h.data.T + bias.data, hidden)
    i = act[..., :hidden]
    f = act[..., hidden : 2 * hidden]
    g = act[..., 2 * hidden : 3 * hidden]
    o = act[..., 3 * hidden :]
    c_new = f * cd + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def bw(grad):
        dh, dc = grad[..., :hidden], grad[..., hidden:]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz, _, _ = _gate_backward(act, dc, dh, tc, cd, hidden)
        dz2 = dz.reshape(-1, 4 * hidden)
        return (
            dz @ w_x.data,
            dz @ w_h.data,
            dc * f,
            dz2.T @ xd.reshape(-1, xd.shape[-1]),
            dz2.T @ hd.reshape(-1, hidden),
            dz2.sum(axis=0),
        )

    return primitive(np.concatenate([h_new, c_new], axis=-1), (x, h, c, w_x, w_h, bias), bw, "lstm_cell")


def lstm_sequence(xs: Tensor, w_x: Tensor, w_h: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """Run an LSTM over (T, in), or (B, T, in), from a zero state; output step t is h_t.

    With ``reverse`` the recurrence runs from the last step to the first.
    Trailing padding in a batch never affects earlier steps of the forward
    recurrence. The backward pass is explicit BPTT.
    """
    hidden = w_h.shape[1]
    if xs.ndim not in (2, 3) or xs.shape[-1] != w_x.shape[1] or w_x.shape[0] != 4 * hidden:
        raise ShapeError(f"lstm_sequence: incompatible shapes x={xs.shape} w_x={w_x.shape} w_h={w_h.shape}")
    batched = xs.ndim == 3
    x3 = xs.data if batched else xs.data[None]
    n_b, n = x3.shape[0], x3.shape[1]
    if n == 0:
        raise ShapeError("lstm_sequence: empty sequence")
    wh = w_h.data
    whT = wh.T
    zx = x3 @ w_x.data.T + bias.data  # (B, T, 4H)
    order = range(n - 1, -1, -1) if reverse else range(n)
    acts = np.empty((n, n_b, 4 * hidden))
    tcs = np.empty((n, n_b, hidden))
    hs = np.empty((n, n_b, hidden))
    c_prevs = np.empty((n, n_b, hidden))
    h_prevs = np.empty((n, n_b, hidden))
    h = np.zeros((n_b, hidden))
    c = np.zeros((n_b, hidden))
    for t in order:
        h_prevs[t] = h
        c_prevs[t] = c
        act = _gate_forward(zx[:, t] + h @ whT, hidden)
        c = act[:, hidden : 2 * hidden] * c + act[:, :hidden] * act[:, 2 * hidden : 3 * hidden]
        tc = np.tanh(c)
        h = act[:, 3 * hidden :] * tc
        acts[t] = act
        tcs[t] = tc
        hs[t] = h
    out = hs.transpose(1, 0, 2)
    if not batched:
        out = out[0]

    def bw(grad):
        g3 = (grad if batched else grad[None]).transpose(1, 0, 2)  # (T, B, H)
        dz = np.empty((n, n_b, 4 * hidden))
        dh_next = np.zeros((n_b, hidden))
        dc_next = np.zeros((n_b, hidden))
        for t in reversed(order):
            o = acts[t, :, 3 * hidden :]
            tc = tcs[t]
            dh = g3[t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[t], f, _ = _gate_backward(acts[t], dc, dh, tc, c_prevs[t], hidden)
            dh_next = dz[t] @ wh
            dc_next = dc * f
        dz_b = dz.transpose(1, 0, 2)  # (B, T, 4H)
        dx = dz_b @ w_x.data
        flat = dz.reshape(-1, 4 * hidden)
        d_wx = flat.T @ x3.transpose(1, 0, 2).reshape(-1, x3.shape[2])
        d_wh = flat.T @ h_prevs.reshape(-1, hidden)
        return (dx if batched else dx[0]), d_wx, d_wh, flat.sum(axis=0)

    return primitive(out, (xs, w_x, w_h, bias), bw, "lstm_sequence")


def lstm_sequence_reference(cell: LSTMCell, xs: Tensor, reverse: bool = False) -> Tensor:
    """Same recurrence built from elementary primitives (test oracle for the fused op)."""
    hidden = cell.hidden
    n = xs.shape[0]
    h = Tensor(np.zeros(hidden))
    c = Tensor(np.zeros(hidden))
    outs: list[Tensor | None] = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for t in order:
        z = nt.add(nt.add(nt.matmul(cell.w_x, xs[t]), nt.matmul(cell.w_h, h)), cell.bias)
        i = nt.sigmoid(z[:hidden])
        f = nt.sigmoid(z[hidden : 2 * hidden])
        g = nt.tanh(z[2 * hidden : 3 * hidden])
        o = nt.sigmoid(z[3 * hidden :])
        c = nt.add(nt.mul(f, c), nt.mul(i, g))
        h = nt.mul(o, nt.tanh(c))
        outs[t] = h
    return nt.stack(outs)


# ---------------------------------------------------------------- BLSTMP


class BLSTMPLayer(Module):
    def __init__(self, n_in: int, units: int, proj: int, rng: np.random.Generator):
        self.fwd = LSTMCell(n_in, units, rng)
        self.bwd = LSTMCell(n_in, units, rng)
        self.proj = Linear(2 * units, proj, rng)

    def __call__(self, xs: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        hf = self.fwd.sequence(xs)
        if xs.ndim == 3:
            # each padded row is reversed within its own length so padding stays trailing
            hb = nt.flip_padded(self.bwd.sequence(nt.flip_padded(xs, lengths)), lengths)
        else:
            hb = self.bwd.sequence(xs, reverse=True)
        return nt.tanh(self.proj(nt.concat([hf, hb], axis=-1)))


class BLSTMP(Module):
    """Stack of bidirectional LSTM layers, each followed by a tanh projection."""

    def __init__(self, idim: int, layers: int, units: int, proj: int, rng: np.random.Generator):
        if layers < 1:
            raise ValueError("BLSTMP needs at least one layer")
        self.layers = [BLSTMPLayer(idim if k == 0 else proj, units, proj, rng) for k in range(layers)]

    @property
    def idim(self) -> int:
        return self.layers[0].fwd.n_in

    def __call__(self, xs: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        return blstmp_forward(self, xs, lengths)


def blstmp_forward(stack: BLSTMP, xs: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
    """(T, D) -> (T, P); or a zero-padded batch (B, T, D) with ``lengths`` -> (B, T, P).

    Outputs at padded positions are unspecified.
    """
    if xs.ndim == 3:
        if lengths is None or len(lengths) != xs.shape[0]:
            raise ShapeError("blstmp_forward: a padded batch needs one length per row")
    elif xs.ndim != 2:
        raise ShapeError(f"blstmp_forward: expected (T, D) or (B, T, D), got {xs.shape}")
    if xs.shape[-2] == 0:
        raise ShapeError("blstmp_forward: empty sequence")
    if xs.shape[-1] != stack.idim:
        raise ShapeError(f"blstmp_forward: input dim {xs.shape[-1]} != {stack.idim}")
    h = xs
    for layer in stack.layers:
        h = layer(h, lengths)
    return h


# ---------------------------------------------------------------- VGG


VGG_CHANNELS = (64, 64, 128, 128)


class VGGBlock(Module):
    """Two conv-conv-pool components: 1->64->64, pool, 64->128->128, pool; 3x3 kernels."""

    def __init__(self, rng: np.random.Generator, channels: tuple[int, int, int, int] = VGG_CHANNELS):
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.k1 = uniform(rng, (c1, 1, 3, 3))
        self.b1 = uniform(rng, (c1,))
        self.k2 = uniform(rng, (c2, c1, 3, 3))
        self.b2 = uniform(rng, (c2,))
        self.k3 = uniform(rng, (c3, c2, 3, 3))
        self.b3 = uniform(rng, (c3,))
        self.k4 = uniform(rng, (c4, c3, 3, 3))
        self.b4 = uniform(rng, (c4,))

    @staticmethod
    def output_dim(idim: int, channels: int = VGG_CHANNELS[-1]) -> int:
        return -(-idim // 4) * channels

    def __call__(self, xs: Tensor) -> Tensor:
        return vgg_forward(self, xs)


def vgg_forward(block: VGGBlock, xs: Tensor) -> Tensor:
    """(T, D) -> (ceil(T/4), ceil(D/4) * C_out), channels-major within each frame."""
    if xs.ndim != 2:
        raise ShapeError(f"vgg_forward: expected (T, D), got {xs.shape}")
    t, d = xs.shape
    if t < 4 or d < 4:
        raise ShapeError(f"vgg_forward: need T >= 4 and D >= 4, got {xs.shape}")
    h = nt.reshape(xs, (1, t, d))
    h = nt.relu(nt.conv2d(h, block.k1, block.b1))
    h = nt.relu(nt.conv2d(h, block.k2, block.b2))
    h = nt.max_pool2d(h)
    h = nt.relu(nt.conv2d(h, block.k3, block.b3))
    h = nt.relu(nt.conv2d(h, block.k4, block.b4))
    h = nt.max_pool2d(h)
    c, to, do = h.shape
    return nt.reshape(nt.transpose(h, (1, 0, 2)), (to, c * do))
