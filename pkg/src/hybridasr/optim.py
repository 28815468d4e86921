"""AdaDelta, plain SGD and Adam over named numpy parameter arrays."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

ADADELTA, SGD, ADAM = "adadelta", "sgd", "adam"


@dataclass
class OptimizerSpec:
    kind: str = ADADELTA
    lr: float = 1.0
    rho: float = 0.95
    adadelta_eps: float = 1e-8
    adadelta_eps_decay: float = 1e-2
    sgd_decay_factor: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in (ADADELTA, SGD, ADAM):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.adadelta_eps > 0:
            raise ValueError("adadelta_eps must be positive")
        for name in ("adadelta_eps_decay", "sgd_decay_factor"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        self.adam_betas = tuple(self.adam_betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


class Optimizer:
    """Stateful optimizer.

    ``lr`` and ``eps`` are the live values; :meth:`decay` applies the
    validation-drop rule (lr scaled for SGD and Adam, eps scaled for AdaDelta).
    """

    def __init__(self, spec: OptimizerSpec):
        self.spec = spec
        self.lr = spec.lr
        self.eps = spec.adadelta_eps
        self.sq_grad: dict[str, np.ndarray] = {}
        self.sq_delta: dict[str, np.ndarray] = {}
        self.moment: dict[str, np.ndarray] = {}
        self.t = 0
        self.rejected = 0

    def decay(self) -> None:
        if self.spec.kind in (SGD, ADAM):
            self.lr *= self.spec.sgd_decay_factor
        else:
            self.eps *= self.spec.adadelta_eps_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Update ``params`` in place. Returns False (and leaves everything
        untouched) when any gradient is non-finite."""
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                self.rejected += 1
                return False
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if self.spec.kind == SGD:
                p -= self.lr * g
                continue
            if self.spec.kind == ADAM:
                b1, b2 = self.spec.adam_betas
                m = b1 * self.moment.get(name, 0.0) + (1 - b1) * g
                v = b2 * self.sq_grad.get(name, 0.0) + (1 - b2) * g * g
                self.moment[name] = m
                self.sq_grad[name] = v
                m_hat = m / (1 - b1**self.t)
                v_hat = v / (1 - b2**self.t)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.spec.adam_eps)
                continue
            rho = self.spec.rho
            eg = self.sq_grad.get(name)
            ed = self.sq_delta.get(name)
            if eg is None:
                eg = np.zeros_like(p)
                ed = np.zeros_like(p)
            eg = rho * eg + (1 - rho) * g * g
            delta = -np.sqrt(ed + self.eps) / np.sqrt(eg + self.eps) * g
            ed = rho * ed + (1 - rho) * delta * delta
            self.sq_grad[name] = eg
            self.sq_delta[name] = ed
            p += self.lr * delta
        return True


def optimizer_step(spec: OptimizerSpec, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: Optimizer | None = None):
    """Functional form: returns updated copies of ``params`` and the optimizer state."""
    opt = state if state is not None else Optimizer(spec)
    new = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    opt.step(new, grads)
    return new, opt


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm
