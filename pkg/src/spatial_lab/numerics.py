"""Dense-array building blocks: tanh MLPs with hand-written reverse mode,
Adam, counter-based random streams and the binary checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteError, ShapeError

SCHEMA_VERSION = 1
_MAGIC = b"SLCK"
_MASK64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------


@dataclass
class RngStream:
    """Counter-based random stream on top of Philox-4x64.

    ``(seed, stream)`` form the Philox key.  Every draw call builds a fresh
    generator whose 256-bit counter has ``counter`` in its second word, then
    advances ``counter`` by exactly one.  A single call therefore owns a
    2**64-block region of the Philox sequence and never overlaps another call,
    whatever ``n`` is.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        ctr = np.array([0, self.counter & _MASK64, 0, 0], dtype=np.uint64)
        self.counter += 1
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def normal(self, size) -> np.ndarray:
        return self._generator().standard_normal(size)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._generator().integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._generator().choice(n, size=size, replace=replace)

    def child(self, index: int) -> "RngStream":
        """Independent stream keyed by (this stream id, index), counter reset."""
        ss = np.random.SeedSequence([self.stream & _MASK64, int(index) & _MASK64, 0x5EED])
        return RngStream(self.seed, int(ss.generate_state(1, np.uint64)[0]), 0)

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        return cls(int(state["seed"]), int(state["stream"]), int(state["counter"]))


def gauss_draw(stream: RngStream, n: int) -> np.ndarray:
    """``n`` standard-normal draws; advances ``stream.counter`` by one."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return stream.normal(n)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


@dataclass
class Mlp:
    """Fully connected net; tanh on hidden layers, identity on the output.

    Weights are stored ``(out, in)`` so a layer computes ``x @ W.T + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.activations:
            self.activations = ["tanh"] * (len(self.weights) - 1)
        if len(self.weights) != len(self.biases) or len(self.activations) != len(self.weights) - 1:
            raise ShapeError("layer lists disagree in length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[1]} != previous output")
        for a in self.activations:
            if a != "tanh":
                raise ValueError(f"unsupported activation {a!r}")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "Mlp":
        return Mlp(list(arrays[0::2]), list(arrays[1::2]), list(self.activations))

    def copy(self) -> "Mlp":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)


def init_mlp(dims: list[int], stream: RngStream, out_scale: float = 1.0) -> Mlp:
    """Gaussian init with std 1/sqrt(fan_in); output layer scaled by ``out_scale``."""
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = stream.normal((n_out, n_in)) / np.sqrt(n_in)
        if i == len(dims) - 2:
            w = w * out_scale
        weights.append(w)
        biases.append(np.zeros(n_out))
    return Mlp(weights, biases)


@dataclass
class Grads:
    """Gradients mirroring an :class:`Mlp`, plus the input gradient."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def _as_batch(params: Mlp, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in_dim {params.in_dim}")
    return xb, single


def forward_trace(params: Mlp, x: np.ndarray) -> list[np.ndarray]:
    """Layer outputs ``[x, h1, ..., out]`` for a batch ``(n, in)``."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def backward_trace(params: Mlp, acts: list[np.ndarray], upstream: np.ndarray) -> Grads:
    """Reverse sweep given a forward trace; gradients are summed over the batch."""
    n_layers = len(params.weights)
    gw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = upstream
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        gw[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i]
    return Grads(gw, gb, delta)


def mlp_forward(params: Mlp, x: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(params, x)
    out = forward_trace(params, xb)[-1]
    return out[0] if single else out


def mlp_backward(params: Mlp, x: np.ndarray, upstream: np.ndarray) -> Grads:
    """Gradients of ``<upstream, mlp_forward(params, x)>`` w.r.t. params and input."""
    xb, single = _as_batch(params, x)
    up = np.asarray(upstream, dtype=np.float64)
    up = up[None, :] if single else up
    if up.shape != (xb.shape[0], params.out_dim):
        raise ShapeError(f"upstream shape {np.shape(upstream)} != output shape")
    grads = backward_trace(params, forward_trace(params, xb), up)
    if single:
        grads.input = grads.input[0]
    return grads


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: list[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Returns new arrays; inputs are untouched.

    Raises NonFiniteError (and changes nothing) if any gradient is not finite.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient; step rejected")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"grad {g.shape} != param {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------
# Layout: b"SLCK" | u32 header length | UTF-8 JSON header | float64 LE arrays
# back to back in header order.


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n])
    if header["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {header['schema_version']}")
    offset = 8 + n
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[spec["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return arrays, header["meta"]


def mlp_to_arrays(net: Mlp, prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"{prefix}.w{i}"] = w
        arrays[f"{prefix}.b{i}"] = b
    return arrays, {"layer_dims": net.dims, "activations": list(net.activations)}


def mlp_from_arrays(arrays: dict[str, np.ndarray], prefix: str, info: dict) -> Mlp:
    n = len(info["layer_dims"]) - 1
    net = Mlp(
        [arrays[f"{prefix}.w{i}"] for i in range(n)],
        [arrays[f"{prefix}.b{i}"] for i in range(n)],
        list(info["activations"]),
    )
    if net.dims != list(info["layer_dims"]):
        raise ShapeError("checkpoint dims disagree with stored arrays")
    return net


def save_mlp(path: str | Path, net: Mlp, meta: dict | None = None) -> None:
    arrays, info = mlp_to_arrays(net, "net")
    save_checkpoint(path, arrays, {**(meta or {}), "net": info})


def load_mlp(path: str | Path) -> tuple[Mlp, dict]:
    arrays, meta = load_checkpoint(path)
    return mlp_from_arrays(arrays, "net", meta["net"]), meta
