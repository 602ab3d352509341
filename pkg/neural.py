import contextlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


class NumericError(ArithmeticError):
    """A non-finite value reached a loss, gradient or parameter."""


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._backward = lambda: None
        self._prev: tuple["Tensor", ...] = ()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))

        for node in topo:
            if node._prev:
                node.grad = None
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node.grad is not None:
                node._backward()

    # --- arithmetic ---
    def __add__(self, other: Any) -> "Tensor":
        other = _lift(other)
        out = _result(self.data + other.data, (self, other))
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad)
                other._accumulate(out.grad)
            out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = _result(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accumulate(-out.grad)
        return out

    def __sub__(self, other: Any) -> "Tensor":
        return self + (-_lift(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return _lift(other) + (-self)

    def __mul__(self, other: Any) -> "Tensor":
        other = _lift(other)
        out = _result(self.data * other.data, (self, other))
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad * other.data)
                other._accumulate(out.grad * self.data)
            out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        other = _lift(other)
        out = _result(self.data / other.data, (self, other))
        if out.requires_grad:
            def _backward():
                self._accumulate(out.grad / other.data)
                other._accumulate(-out.grad * self.data / other.data ** 2)
            out._backward = _backward
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        other = _lift(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError(f"matmul needs at least 2-D operands, got {self.shape} and {other.shape}")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {self.shape} @ {other.shape}")
        out = _result(np.matmul(self.data, other.data), (self, other))
        if out.requires_grad:
            def _backward():
                self._accumulate(np.matmul(out.grad, np.swapaxes(other.data, -1, -2)))
                other._accumulate(np.matmul(np.swapaxes(self.data, -1, -2), out.grad))
            out._backward = _backward
        return out

    # --- shape ---
    def __getitem__(self, idx: Any) -> "Tensor":
        out = _result(self.data[idx], (self,))
        if out.requires_grad:
            def _backward():
                g = np.zeros_like(self.data)
                np.add.at(g, idx, out.grad)
                self._accumulate(g)
            out._backward = _backward
        return out

    def transpose(self, *axes: int) -> "Tensor":
        perm = tuple(axes) if axes else tuple(reversed(range(self.ndim)))
        out = _result(np.transpose(self.data, perm), (self,))
        if out.requires_grad:
            inverse = tuple(np.argsort(perm))
            out._backward = lambda: self._accumulate(np.transpose(out.grad, inverse))
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def reshape(self, *shape: int) -> "Tensor":
        out = _result(self.data.reshape(*shape), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accumulate(out.grad.reshape(self.shape))
        return out

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def _backward():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.shape))
            out._backward = _backward
        return out

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(n, 1))

    # --- elementwise ---
    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = _result(y, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accumulate(out.grad * (1 - y ** 2))
        return out

    def sigmoid(self) -> "Tensor":
        y = _sigmoid(self.data)
        out = _result(y, (self,))
        if out.requires_grad:
            out._backward = lambda: self._accumulate(out.grad * y * (1 - y))
        return out

    def softplus(self) -> "Tensor":
        out = _result(np.logaddexp(0.0, self.data), (self,))
        if out.requires_grad:
            out._backward = lambda: self._accumulate(out.grad * _sigmoid(self.data))
        return out

    def gelu(self) -> "Tensor":
        x = self.data
        c = math.sqrt(2 / math.pi)
        t = np.tanh(c * (x + 0.044715 * x ** 3))
        out = _result(0.5 * x * (1 + t), (self,))
        if out.requires_grad:
            def _backward():
                dt = (1 - t ** 2) * c * (1 + 3 * 0.044715 * x ** 2)
                self._accumulate(out.grad * (0.5 * (1 + t) + 0.5 * x * dt))
            out._backward = _backward
        return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * x))


def _lift(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._prev = parents
    return out


# --- Functional layers ---
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def _backward():
            for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
                t._accumulate(g)
        out._backward = _backward
    return out


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != W.shape[-1]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if x.ndim == 1:
        y = (x.reshape(1, -1) @ W.T).reshape(W.shape[0])
    else:
        y = x @ W.T
    return y + b if b is not None else y


def embed(table: Tensor, indices: Sequence[int] | np.ndarray) -> Tensor:
    return table[np.asarray(indices, dtype=np.int64)]


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; all-false rows give zeros."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    with np.errstate(invalid="ignore", over="ignore"):
        z = np.where(m, logits.data, -np.inf)
        zmax = z.max(axis=-1, keepdims=True) if z.shape[-1] else np.zeros(z.shape[:-1] + (1,))
        zmax = np.where(np.isfinite(zmax), zmax, 0.0)
        e = np.where(m, np.exp(z - zmax), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    out = _result(y, (logits,))
    if out.requires_grad:
        def _backward():
            g = out.grad
            logits._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))
        out._backward = _backward
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = _result(gain.data * xhat + bias.data, (x, gain, bias))
    if out.requires_grad:
        def _backward():
            g = out.grad
            gain._accumulate(g * xhat)
            bias._accumulate(g)
            dxhat = g * gain.data
            x._accumulate(
                inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            )
        out._backward = _backward
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over every element."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce: logits shape {logits.shape} does not match targets shape {y.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = max(x.size, 1)
    out = _result(np.asarray(loss.sum() / n), (logits,))
    if out.requires_grad:
        out._backward = lambda: logits._accumulate(out.grad * (_sigmoid(x) - y) / n)
    return out


# --- Parameters ---
Params = dict[str, Tensor]


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_out, fan_in = (shape[0], shape[-1]) if len(shape) > 1 else (1, shape[0])
    limit = math.sqrt(6 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def add_param(params: Params, name: str, data: np.ndarray) -> Tensor:
    if name in params:
        raise ValueError(f"duplicate parameter name: {name}")
    t = Tensor(data, requires_grad=True, name=name)
    params[name] = t
    return t


def init_linear(params: Params, name: str, rng: np.random.Generator, n_out: int, n_in: int, bias: bool = True) -> None:
    add_param(params, f"{name}.w", glorot(rng, (n_out, n_in)))
    if bias:
        add_param(params, f"{name}.b", np.zeros(n_out))


def init_layer_norm(params: Params, name: str, d: int) -> None:
    add_param(params, f"{name}.g", np.ones(d))
    add_param(params, f"{name}.b", np.zeros(d))


def apply_linear(params: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def apply_layer_norm(params: Mapping[str, Tensor], name: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_attention_block(params: Params, name: str, rng: np.random.Generator, d: int) -> None:
    init_layer_norm(params, f"{name}.ln1", d)
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", rng, d, d)
    init_layer_norm(params, f"{name}.ln2", d)
    init_linear(params, f"{name}.ff1", rng, 4 * d, d)
    init_linear(params, f"{name}.ff2", rng, d, 4 * d)


def attention_block(
    x: Tensor,
    params: Mapping[str, Tensor],
    name: str,
    heads: int,
    causal: bool = False,
    memory: Optional[Tensor] = None,
) -> Tensor:
    """Pre-norm multi-head self-attention plus a 4x GELU feed-forward, both residual.

    With ``memory`` the positions of ``x`` additionally attend to every memory
    row; ``causal`` only restricts attention among the positions of ``x``.
    """
    L, d = x.shape
    if d % heads:
        raise ShapeError(f"attention: width {d} is not divisible by {heads} heads")
    dh = d // heads

    h = apply_layer_norm(params, f"{name}.ln1", x)
    src = concat([apply_layer_norm(params, f"{name}.ln1", memory), h]) if memory is not None else h
    S = src.shape[0]

    def split(t: Tensor, n: int) -> Tensor:
        return t.reshape(n, heads, dh).transpose(1, 0, 2)

    q = split(apply_linear(params, f"{name}.q", h), L)
    k = split(apply_linear(params, f"{name}.k", src), S)
    v = split(apply_linear(params, f"{name}.v", src), S)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))

    mask = np.ones((L, S), dtype=bool)
    if causal:
        mask[:, S - L :] = np.tril(np.ones((L, L), dtype=bool))
    ctx = (masked_softmax(scores, mask[None]) @ v).transpose(1, 0, 2).reshape(L, d)
    x = x + apply_linear(params, f"{name}.o", ctx)

    ff = apply_linear(params, f"{name}.ff1", apply_layer_norm(params, f"{name}.ln2", x)).gelu()
    return x + apply_linear(params, f"{name}.ff2", ff)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def parameter_count(params: Mapping[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


# --- Optimiser ---
@dataclass
class AdamState:
    lr: float
    milestones: tuple[int, ...] = ()
    decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self, step: int) -> float:
        """Learning rate used for the update numbered ``step`` (1-based)."""
        passed = sum(1 for m in self.milestones if step > m)
        return self.lr * self.decay ** passed


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> float:
    """Apply one Adam update in place; returns the learning rate that was used."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g

    state.step += 1
    t = state.step
    lr = state.effective_lr(t)
    if t > 1 and lr != state.effective_lr(t - 1):
        logger.info("[adam] learning rate -> %g at step %d", lr, t)
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g ** 2
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return lr


# --- Checkpoints ---
CHECKPOINT_MAGIC = b"SSGN"
CHECKPOINT_VERSION = 1


def _pack_array(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode_checkpoint(params: Mapping[str, Tensor], state: AdamState, metadata: Mapping[str, Any]) -> bytes:
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<IQddddd", CHECKPOINT_VERSION, state.step, state.lr, state.decay, state.beta1, state.beta2, state.eps),
        struct.pack("<I", len(state.milestones)),
        struct.pack(f"<{len(state.milestones)}Q", *state.milestones),
        struct.pack("<I", len(params)),
    ]
    for name, p in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
        parts.append(_pack_array(p.data))
        parts.append(_pack_array(state.m.get(name, np.zeros_like(p.data))))
        parts.append(_pack_array(state.v.get(name, np.zeros_like(p.data))))
    meta = json.dumps(dict(metadata), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint is truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def decode_checkpoint(data: bytes) -> tuple[Params, AdamState, dict[str, Any]]:
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, step, lr, decay, beta1, beta2, eps = r.unpack("<IQddddd")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    (n_ms,) = r.unpack("<I")
    milestones = r.unpack(f"<{n_ms}Q")
    state = AdamState(lr=lr, milestones=tuple(milestones), decay=decay, beta1=beta1, beta2=beta2, eps=eps, step=step)
    params: Params = {}
    (n_params,) = r.unpack("<I")
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        params[name] = Tensor(r.array(shape), requires_grad=True, name=name)
        state.m[name] = r.array(shape)
        state.v[name] = r.array(shape)
    (meta_len,) = r.unpack("<I")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint metadata is malformed: {e}") from e
    if r.pos != len(data):
        raise CheckpointError(f"checkpoint has {len(data) - r.pos} trailing bytes")
    return params, state, metadata
