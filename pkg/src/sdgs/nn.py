"""Small feed-forward networks with explicit reverse passes, Adam, and the
sinusoidal time embedding used to condition them."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("linear", "relu", "sigmoid", "tanh")
_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}


def _act(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "sigmoid":
        return sigmoid(z)
    if tag == "tanh":
        return np.tanh(z)
    return z


def _act_grad(tag: str, z: np.ndarray, a: np.ndarray, g: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return g * (z > 0)
    if tag == "sigmoid":
        return g * a * (1.0 - a)
    if tag == "tanh":
        return g * (1.0 - a * a)
    return g


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


class MlpNet:
    """Dense ReLU network. Weights are ``(fan_in, fan_out)`` so a batch of
    row vectors maps as ``x @ W + b``.

    ``forward`` caches its activations; ``backward`` consumes the most recent
    cache, adds parameter gradients into ``grads`` and returns dL/dx.
    """

    def __init__(self, sizes, activations=None, rng=None, zero_last=False):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if activations is None:
            activations = ["relu"] * (len(sizes) - 2) + ["linear"]
        if len(activations) != len(sizes) - 1 or any(a not in _TAG for a in activations):
            raise ValueError(f"bad activation tags {activations}")
        self.sizes = sizes
        self.activations = list(activations)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            # kaiming-uniform for relu layers, plain fan-in scaling for the output layer
            gain = 6.0 if self.activations[i] == "relu" else 1.0
            bound = np.sqrt(gain / fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        if zero_last:
            self.weights[-1][:] = 0.0
            self.biases[-1][:] = 0.0
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]
        self._cache = None

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def grads(self) -> list[np.ndarray]:
        return [g for pair in zip(self.grad_weights, self.grad_biases) for g in pair]

    def zero_grad(self) -> None:
        for g in self.grads():
            g[...] = 0.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {x.shape[-1]}")
        squeeze = x.ndim == 1
        a = x[None] if squeeze else x
        inputs, pre, post = [], [], []
        for w, b, tag in zip(self.weights, self.biases, self.activations):
            inputs.append(a)
            z = a @ w + b
            a = _act(tag, z)
            pre.append(z)
            post.append(a)
        self._cache = (inputs, pre, post, squeeze)
        return a[0] if squeeze else a

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called without a recorded forward pass")
        inputs, pre, post, squeeze = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None] if squeeze else g
        if g.shape != post[-1].shape:
            raise ValueError(f"grad_out shape {g.shape} does not match output {post[-1].shape}")
        for i in reversed(range(len(self.weights))):
            g = _act_grad(self.activations[i], pre[i], post[i], g)
            self.grad_weights[i] += inputs[i].T @ g
            self.grad_biases[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g[0] if squeeze else g

    def copy(self) -> "MlpNet":
        net = MlpNet.__new__(MlpNet)
        net.sizes = list(self.sizes)
        net.activations = list(self.activations)
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net.grad_weights = [np.zeros_like(w) for w in self.weights]
        net.grad_biases = [np.zeros_like(b) for b in self.biases]
        net._cache = None
        return net

    # serialization: u32 n_layers, u32 sizes[n+1], u8 tags[n], then float32 W,b per layer

    def to_bytes(self) -> bytes:
        n = len(self.weights)
        head = struct.pack(f"<I{n + 1}I{n}B", n, *self.sizes, *(_TAG[a] for a in self.activations))
        body = b"".join(
            np.ascontiguousarray(p, dtype="<f4").tobytes() for pair in zip(self.weights, self.biases) for p in pair
        )
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["MlpNet", int]:
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        sizes = list(struct.unpack_from(f"<{n + 1}I", buf, offset))
        offset += 4 * (n + 1)
        tags = [ACTIVATIONS[t] for t in struct.unpack_from(f"<{n}B", buf, offset)]
        offset += n
        net = cls.__new__(cls)
        net.sizes, net.activations = sizes, tags
        net.weights, net.biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            for shape, dest in (((fan_in, fan_out), net.weights), ((fan_out,), net.biases)):
                count = int(np.prod(shape))
                if offset + 4 * count > len(buf):
                    raise EOFError("truncated network weights")
                dest.append(np.frombuffer(buf, "<f4", count, offset).astype(np.float64).reshape(shape))
                offset += 4 * count
        net.grad_weights = [np.zeros_like(w) for w in net.weights]
        net.grad_biases = [np.zeros_like(b) for b in net.biases]
        net._cache = None
        return net, offset


def mlp_forward(net: MlpNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def mlp_backward(net: MlpNet, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Recompute the forward pass for ``x`` and backpropagate ``grad_out``."""
    net.forward(x)
    return net.backward(grad_out)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float | None = None) -> np.ndarray:
    """In-place bias-corrected Adam update of ``param``; clears ``grad``."""
    if param.shape != grad.shape:
        raise ValueError(f"param {param.shape} and grad {grad.shape} differ")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    elif state.m.shape != param.shape:
        raise ValueError("optimizer moments do not match the parameter shape")
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    if lr != 0.0:
        param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    grad[...] = 0.0
    return param


@dataclass(frozen=True)
class TemporalEmbedding:
    bands: int = 6
    base: float = 1.0
    append_raw: bool = True

    @property
    def dim(self) -> int:
        return 2 * self.bands + (1 if self.append_raw else 0)


def embed_time(t: float, emb: TemporalEmbedding = TemporalEmbedding()) -> np.ndarray:
    """``[sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^(L-1) pi t), cos(...)]`` (+ t)."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        log.warning("time %.4f outside [0, 1]; clamping", t)
        t = min(max(t, 0.0), 1.0)
    freqs = emb.base * 2.0 ** np.arange(emb.bands) * np.pi * t
    out = np.empty(2 * emb.bands)
    out[0::2] = np.sin(freqs)
    out[1::2] = np.cos(freqs)
    if emb.append_raw:
        out = np.append(out, t)
    return out
