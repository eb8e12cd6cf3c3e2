"""Feed-forward tanh networks with exact backprop, SGD and Polyak updates.

Parameters live in one flat float64 vector, layer by layer: the weight matrix
of layer ``l`` (``sizes[l+1] x sizes[l]``, row-major) followed by its bias.
Optimizer steps, soft updates and checkpoints all work on that vector.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._jit import USE_JIT, njit
from .errors import CheckpointError, NonFiniteError

ACTIVATIONS = ("linear", "tanh")
MAGIC = b"CMDDPGNN"
FORMAT_VERSION = 1


def n_params(sizes) -> int:
    return int(sum(sizes[l + 1] * sizes[l] + sizes[l + 1] for l in range(len(sizes) - 1)))


class _Layered:
    """Flat vector with per-layer weight/bias views."""

    layer_sizes: tuple
    flat: np.ndarray

    def _slices(self):
        o = 0
        s = self.layer_sizes
        for l in range(len(s) - 1):
            nw = s[l + 1] * s[l]
            yield (o, o + nw), (o + nw, o + nw + s[l + 1])
            o += nw + s[l + 1]

    @property
    def weights(self) -> list[np.ndarray]:
        s = self.layer_sizes
        return [self.flat[a:b].reshape(s[l + 1], s[l]) for l, ((a, b), _) in enumerate(self._slices())]

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.flat[a:b] for _, (a, b) in self._slices()]


@dataclass
class MlpParams(_Layered):
    layer_sizes: tuple
    flat: np.ndarray
    output_activation: str = "linear"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {self.layer_sizes}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {ACTIVATIONS}")
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (n_params(self.layer_sizes),):
            raise ValueError("flat parameter vector does not match layer sizes")

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, output_activation="linear") -> "MlpParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        p = cls(layer_sizes, np.zeros(n_params(layer_sizes)), output_activation)
        for W, b in zip(p.weights, p.biases):
            bound = 1.0 / np.sqrt(W.shape[1])
            W[:] = rng.uniform(-bound, bound, W.shape)
            b[:] = rng.uniform(-bound, bound, b.shape)
        return p

    @classmethod
    def zeros(cls, layer_sizes, output_activation="linear") -> "MlpParams":
        return cls(layer_sizes, np.zeros(n_params(layer_sizes)), output_activation)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpParams":
        return MlpParams(self.layer_sizes, self.flat.copy(), self.output_activation)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


@dataclass
class GradientSet(_Layered):
    layer_sizes: tuple
    flat: np.ndarray

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "GradientSet":
        return cls(params.layer_sizes, np.zeros_like(params.flat))

    def __add__(self, other: "GradientSet") -> "GradientSet":
        _check_congruent(self, other)
        return GradientSet(self.layer_sizes, self.flat + other.flat)

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet(self.layer_sizes, self.flat * c)


def _check_congruent(a, b):
    if tuple(a.layer_sizes) != tuple(b.layer_sizes):
        raise ValueError(f"shape mismatch: {a.layer_sizes} vs {b.layer_sizes}")


# -- kernels -----------------------------------------------------------------
# Activations of every layer (input included) are packed into one buffer:
# layer l occupies ``B * sizes[l]`` entries, row-major (B, sizes[l]).


@njit
def _forward_nb(flat, sizes, X, out_tanh):
    B = X.shape[0]
    nl = sizes.shape[0]
    total = 0
    for l in range(nl):
        total += sizes[l]
    acts = np.empty(B * total)
    acts[: B * sizes[0]] = X.ravel()
    po = 0
    ao = 0
    for l in range(nl - 1):
        n0 = sizes[l]
        n1 = sizes[l + 1]
        W = flat[po:po + n1 * n0].reshape((n1, n0))
        po += n1 * n0
        b = flat[po:po + n1]
        po += n1
        A = acts[ao:ao + B * n0].reshape((B, n0))
        Z = np.dot(A, W.T)
        ao += B * n0
        out = acts[ao:ao + B * n1].reshape((B, n1))
        squash = out_tanh or l < nl - 2
        for i in range(B):
            for j in range(n1):
                z = Z[i, j] + b[j]
                out[i, j] = np.tanh(z) if squash else z
    return acts


@njit
def _backward_nb(flat, sizes, acts, dY, out_tanh):
    B = dY.shape[0]
    nl = sizes.shape[0]
    grad = np.zeros(flat.shape[0])
    poff = np.zeros(nl, dtype=np.int64)
    aoff = np.zeros(nl, dtype=np.int64)
    for l in range(1, nl):
        poff[l] = poff[l - 1] + sizes[l] * sizes[l - 1] + sizes[l]
        aoff[l] = aoff[l - 1] + B * sizes[l - 1]
    delta = dY.copy()
    for l in range(nl - 2, -1, -1):
        n0 = sizes[l]
        n1 = sizes[l + 1]
        A_out = acts[aoff[l + 1]:aoff[l + 1] + B * n1].reshape((B, n1))
        dZ = np.empty((B, n1))
        if l == nl - 2 and not out_tanh:
            dZ[:, :] = delta
        else:
            for i in range(B):
                for j in range(n1):
                    dZ[i, j] = delta[i, j] * (1.0 - A_out[i, j] * A_out[i, j])
        A_in = acts[aoff[l]:aoff[l] + B * n0].reshape((B, n0))
        gW = np.dot(dZ.T, A_in)
        o = poff[l]
        grad[o:o + n1 * n0] = gW.ravel()
        for j in range(n1):
            s = 0.0
            for i in range(B):
                s += dZ[i, j]
            grad[o + n1 * n0 + j] = s
        W = flat[o:o + n1 * n0].reshape((n1, n0))
        delta = np.dot(dZ, W)
    return grad, delta


def _forward_np(flat, sizes, X, out_tanh):
    B = X.shape[0]
    acts = [X]
    po = 0
    nl = len(sizes)
    for l in range(nl - 1):
        n0, n1 = sizes[l], sizes[l + 1]
        W = flat[po:po + n1 * n0].reshape(n1, n0)
        po += n1 * n0
        b = flat[po:po + n1]
        po += n1
        z = acts[-1] @ W.T + b
        acts.append(np.tanh(z) if (out_tanh or l < nl - 2) else z)
    return np.concatenate([a.reshape(B * a.shape[1]) for a in acts])


def _backward_np(flat, sizes, acts, dY, out_tanh):
    B = dY.shape[0]
    nl = len(sizes)
    poff = np.concatenate([[0], np.cumsum([sizes[l + 1] * sizes[l] + sizes[l + 1] for l in range(nl - 1)])])
    aoff = np.concatenate([[0], np.cumsum([B * n for n in sizes])])
    grad = np.zeros_like(flat)
    delta = dY
    for l in range(nl - 2, -1, -1):
        n0, n1 = sizes[l], sizes[l + 1]
        a_out = acts[aoff[l + 1]:aoff[l + 2]].reshape(B, n1)
        dz = delta if (l == nl - 2 and not out_tanh) else delta * (1.0 - a_out ** 2)
        a_in = acts[aoff[l]:aoff[l + 1]].reshape(B, n0)
        o = poff[l]
        grad[o:o + n1 * n0] = (dz.T @ a_in).ravel()
        grad[o + n1 * n0:o + n1 * n0 + n1] = dz.sum(axis=0)
        delta = dz @ flat[o:o + n1 * n0].reshape(n1, n0)
    return grad, delta


if USE_JIT:
    _forward_kernel, _backward_kernel = _forward_nb, _backward_nb
else:
    _forward_kernel, _backward_kernel = _forward_np, _backward_np


# -- public API --------------------------------------------------------------


class Trace:
    """Forward activations kept for a later ``vjp``."""

    __slots__ = ("acts", "batch", "output", "squeeze")

    def __init__(self, acts, batch, n_out, squeeze):
        self.acts = acts
        self.batch = batch
        self.output = acts[acts.shape[0] - batch * n_out:].reshape(batch, n_out)
        self.squeeze = squeeze


def _as_batch(params: MlpParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    X = np.ascontiguousarray(x[None, :] if squeeze else x)
    if X.ndim != 2 or X.shape[1] != params.n_in:
        raise ValueError(f"input width {X.shape[-1]} != {params.n_in}")
    return X, squeeze


def trace(params: MlpParams, x) -> Trace:
    X, squeeze = _as_batch(params, x)
    sizes = np.asarray(params.layer_sizes, dtype=np.int64)
    acts = _forward_kernel(params.flat, sizes, X, params.output_activation == "tanh")
    return Trace(acts, X.shape[0], params.n_out, squeeze)


def forward(params: MlpParams, x) -> np.ndarray:
    """Network output for one input vector or a batch of rows."""
    tr = trace(params, x)
    return tr.output[0].copy() if tr.squeeze else tr.output.copy()


def vjp(params: MlpParams, tr: Trace, output_grad) -> tuple[GradientSet, np.ndarray]:
    """Parameter gradient (summed over the batch) and input gradient."""
    dY = np.asarray(output_grad, dtype=np.float64)
    dY = np.ascontiguousarray(dY.reshape(tr.batch, params.n_out))
    sizes = np.asarray(params.layer_sizes, dtype=np.int64)
    g, dx = _backward_kernel(params.flat, sizes, tr.acts, dY, params.output_activation == "tanh")
    return GradientSet(params.layer_sizes, g), (dx[0] if tr.squeeze else dx)


def backward(params: MlpParams, x, output_grad) -> GradientSet:
    return vjp(params, trace(params, x), output_grad)[0]


def sgd_step(params: MlpParams, grads: GradientSet, lr: float) -> None:
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    _check_congruent(params, grads)
    if not np.all(np.isfinite(grads.flat)):
        raise NonFiniteError("non-finite gradient rejected")
    params.flat -= lr * grads.flat


class Sgd:
    """SGD with optional heavy-ball momentum; one velocity buffer per network.

    ``lr == 0`` freezes the network (steps are no-ops).
    """

    def __init__(self, lr: float = 1e-3, momentum: float = 0.0):
        if not lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: np.ndarray | None = None

    def step(self, params: MlpParams, grads: GradientSet) -> None:
        if self.lr == 0.0:
            return
        if self.momentum == 0.0:
            sgd_step(params, grads, self.lr)
            return
        _check_congruent(params, grads)
        if not np.all(np.isfinite(grads.flat)):
            raise NonFiniteError("non-finite gradient rejected")
        if self.velocity is None:
            self.velocity = np.zeros_like(params.flat)
        self.velocity *= self.momentum
        self.velocity += grads.flat
        params.flat -= self.lr * self.velocity


def soft_update(target: MlpParams, online: MlpParams, tau: float) -> None:
    """``target <- (1 - tau) * online + tau * target``; large tau moves the target slowly."""
    _check_congruent(target, online)
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    target.flat[:] = (1.0 - tau) * online.flat + tau * target.flat


def hard_update(target: MlpParams, online: MlpParams) -> None:
    _check_congruent(target, online)
    target.flat[:] = online.flat


# -- checkpoints -------------------------------------------------------------
# magic | u32 version | u8 output activation | u32 n_layers | u32 sizes[n]
# | u64 n_params | f64 params[n_params] (little endian) | u32 crc32 of all before


def dumps(params: MlpParams) -> bytes:
    sizes = params.layer_sizes
    head = MAGIC + struct.pack("<IBI", FORMAT_VERSION, ACTIVATIONS.index(params.output_activation), len(sizes))
    head += struct.pack(f"<{len(sizes)}I", *sizes) + struct.pack("<Q", params.flat.size)
    body = head + params.flat.astype("<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes) -> MlpParams:
    fixed = len(MAGIC) + struct.calcsize("<IBI")
    if len(data) < fixed or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a network checkpoint (bad magic or truncated)")
    version, act, nl = struct.unpack_from("<IBI", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version} != supported {FORMAT_VERSION}")
    o = fixed
    try:
        sizes = struct.unpack_from(f"<{nl}I", data, o)
        o += 4 * nl
        (count,) = struct.unpack_from("<Q", data, o)
        o += 8
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint header: {e}") from None
    end = o + 8 * count
    if len(data) != end + 4:
        raise CheckpointError("truncated or oversized checkpoint")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    if act >= len(ACTIVATIONS) or count != n_params(sizes):
        raise CheckpointError("inconsistent checkpoint header")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=o).astype(np.float64)
    return MlpParams(sizes, flat, ACTIVATIONS[act])


def save_params(params: MlpParams, path: str | Path) -> None:
    Path(path).write_bytes(dumps(params))


def load_params(path: str | Path) -> MlpParams:
    return loads(Path(path).read_bytes())
