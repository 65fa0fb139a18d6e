"""Small dense feed-forward networks in numpy with hand-written backprop and Adam.

Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` where ``Wk`` has
shape ``(fan_in, fan_out)``. That order is also the serialization order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

HEADS = ("linear", "softmax", "tanh", "sigmoid")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """ReLU network with a configurable output head.

    ``forward`` caches what ``backward`` needs, so call them in pairs.
    Inputs may be a single vector or a ``(batch, features)`` matrix.
    """

    def __init__(self, sizes, head: str = "linear", l2: float = 0.0,
                 rng: np.random.Generator | None = None, zero: bool = False):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = [int(n) for n in sizes]
        self.head = head
        self.l2 = float(l2)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.flat = np.zeros(self.n_params)
        self.params = self._views(self.flat)
        if not zero:
            for W, (fan_in, fan_out) in zip(self.params[::2], zip(self.sizes[:-1], self.sizes[1:])):
                W[...] = glorot_uniform(rng, fan_in, fan_out)
        self._cache = None

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in zip(self.sizes[:-1], self.sizes[1:]))

    def _views(self, flat: np.ndarray) -> list[np.ndarray]:
        """Per-layer ``[W0, b0, ...]`` views into one contiguous vector."""
        out, offset = [], 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            out.append(flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out))
            offset += fan_in * fan_out
            out.append(flat[offset:offset + fan_out])
            offset += fan_out
        return out

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def _run(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input has {h.shape[1]} features, expected {self.sizes[0]}")
        hs = [h]
        last = self.n_layers - 1
        for k in range(self.n_layers):
            z = h @ self.params[2 * k] + self.params[2 * k + 1]
            if k < last:
                h = np.maximum(z, 0.0)
                hs.append(h)
        return single, hs, z

    def _squash(self, z):
        if self.head == "softmax":
            return softmax(z)
        if self.head == "tanh":
            return np.tanh(z)
        if self.head == "sigmoid":
            return 1.0 / (1.0 + np.exp(-z))
        return z

    def forward(self, x) -> np.ndarray:
        single, hs, z = self._run(x)
        y = self._squash(z)
        self._cache = (single, hs, z, y)
        return y[0] if single else y

    def logits(self, x) -> np.ndarray:
        """Pre-head outputs; also primes the cache for ``backward``."""
        single, hs, z = self._run(x)
        self._cache = (single, hs, z, self._squash(z))
        return z[0] if single else z

    def predict(self, x) -> np.ndarray:
        """Forward pass that leaves the backward cache alone."""
        single, _, z = self._run(x)
        y = self._squash(z)
        return y[0] if single else y

    def backward(self, upstream, wrt: str = "output", flat: bool = False):
        """Gradient of ``sum(upstream * output) + l2 * sum ||W||^2``.

        ``wrt="logits"`` treats ``upstream`` as the gradient with respect
        to the pre-head values instead of the head outputs. With ``flat=True``
        the result is one vector laid out like :attr:`flat`, otherwise a list
        shaped like :attr:`params`.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        single, hs, z, y = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if wrt == "output":
            if self.head == "softmax":
                g = y * (g - (g * y).sum(axis=1, keepdims=True))
            elif self.head == "tanh":
                g = g * (1.0 - y * y)
            elif self.head == "sigmoid":
                g = g * y * (1.0 - y)
        elif wrt != "logits":
            raise ValueError(wrt)
        out = np.empty(self.n_params)
        grads = self._views(out)
        for k in range(self.n_layers - 1, -1, -1):
            W = self.params[2 * k]
            h = hs[k]
            np.matmul(h.T, g, out=grads[2 * k])
            if self.l2:
                grads[2 * k] += (2.0 * self.l2) * W
            g.sum(axis=0, out=grads[2 * k + 1])
            if k > 0:
                g = (g @ W.T) * (h > 0.0)
        return out if flat else grads

    def l2_penalty(self) -> float:
        return self.l2 * sum(float((W * W).sum()) for W in self.params[::2])

    # parameter handling

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.head = self.head
        other.l2 = self.l2
        other.flat = self.flat.copy()
        other.params = other._views(other.flat)
        other._cache = None
        return other

    def load_params_from(self, other: "Mlp") -> None:
        self.flat[:] = other.flat

    def get_flat(self) -> np.ndarray:
        return self.flat.copy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        self.flat[:] = flat.ravel()

    def to_dict(self) -> dict:
        return {"sizes": self.sizes, "head": self.head, "l2": self.l2,
                "layout": "W0(in,out) b0 W1 b1 ... row-major",
                "params": self.get_flat().tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        net = cls(d["sizes"], head=d["head"], l2=d.get("l2", 0.0), zero=True)
        net.set_flat(d["params"])
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adam with bias correction, updating a parameter list in place."""

    def __init__(self, params, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step = self.lr * np.sqrt(c2) / c1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            tmp = np.multiply(g, 1.0 - b1)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += self.eps * np.sqrt(c2)
            np.divide(m, tmp, out=tmp)
            tmp *= step
            p -= tmp


def adam_step(net: Mlp, state: Adam, grads) -> None:
    """Adam update of ``net``; ``state`` must have been built with ``Adam([net.flat])``."""
    if isinstance(grads, list):
        grads = np.concatenate([g.ravel() for g in grads])
    state.step([net.flat], [grads])
