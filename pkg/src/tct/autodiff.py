"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable op builds an output :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` orders the recorded graph topologically (the tape)
and replays the closures in reverse, accumulating into ``.grad`` of every
leaf that requires it.
"""
from __future__ import annotations

import contextlib
import hashlib
import struct
import threading
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
MASK_VALUE = -1e9


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class VocabularyError(IndexError):
    """A token id lies outside the vocabulary."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``.grad`` of every reachable leaf that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that is not part of a recorded graph")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _result(out, (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


# -- reductions and shape ------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor, i: int = -2, j: int = -3) -> Tensor:
    axes = list(range(x.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat of an empty list")
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shapes {[x.shape for x in xs]} along axis {axis}") from exc
    return _result(data, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


# -- normalisation and probabilities ---------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax; ``-inf`` inputs get exactly zero weight."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-9) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity at eval."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab}")
    tshape = table.shape

    def backward(g):
        gt = np.zeros(tshape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward, "embedding_lookup")


# -- losses --------------------------------------------------------------------

def _position_weights(mask, shape: tuple[int, ...]) -> tuple[np.ndarray, float]:
    w = np.ones(shape) if mask is None else np.broadcast_to(np.asarray(mask, dtype=DTYPE), shape)
    n = float(w.sum())
    if n == 0:
        raise ContractError("loss mask selects no positions")
    return w, n


def cross_entropy(logits: Tensor, target_ids, pad_id: int | None = 0) -> Tensor:
    """Mean negative log-likelihood of ``target_ids`` over non-pad positions."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    vocab = logits.shape[-1]
    if logits.shape[:-1] != target_ids.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {target_ids.shape}")
    if target_ids.size and (target_ids.min() < 0 or target_ids.max() >= vocab):
        raise VocabularyError(f"target ids must lie in [0, {vocab})")
    valid = np.ones(target_ids.shape, bool) if pad_id is None else target_ids != pad_id
    w, n = _position_weights(valid, target_ids.shape)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, target_ids[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / n

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target_ids[..., None],
                          np.take_along_axis(grad, target_ids[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / n)[..., None] * g,)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute error over every feature of the selected positions."""
    td = as_tensor(target).data
    if pred.shape != td.shape:
        raise DimensionError(f"l1_loss shapes {pred.shape} vs {td.shape}")
    w, n = _position_weights(mask, pred.shape[:-1])
    n *= pred.shape[-1]
    diff = pred.data - td
    loss = (np.abs(diff) * w[..., None]).sum() / n
    return _result(np.asarray(loss), (pred,),
                   lambda g: (np.sign(diff) * w[..., None] / n * g,), "l1_loss")


def cosine_similarity_loss(pred: Tensor, target, mask=None, eps: float = 1e-12) -> Tensor:
    """Mean over selected positions of ``1 - cos(pred_t, target_t)``."""
    td = as_tensor(target).data
    if pred.shape != td.shape:
        raise DimensionError(f"cosine loss shapes {pred.shape} vs {td.shape}")
    w, n = _position_weights(mask, pred.shape[:-1])
    pd = pred.data
    pn = np.sqrt((pd * pd).sum(-1, keepdims=True)) + eps
    tn = np.sqrt((td * td).sum(-1, keepdims=True)) + eps
    dot = (pd * td).sum(-1, keepdims=True)
    cos = dot / (pn * tn)
    loss = ((1.0 - cos[..., 0]) * w).sum() / n

    def backward(g):
        dcos = td / (pn * tn) - cos * pd / (pn * (pn - eps))
        return (-dcos * w[..., None] / n * g,)

    return _result(np.asarray(loss), (pred,), backward, "cosine_similarity_loss")


# -- parameters, initialisation and checkpoints ---------------------------------

def keyed_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, name)``."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


class Initializer:
    """Creates named parameters; each draws from its own keyed stream."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def xavier(self, name: str, shape: tuple[int, int]) -> Tensor:
        fan_in, fan_out = shape[-2], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        data = keyed_rng(self.seed, name).uniform(-bound, bound, size=shape)
        return Tensor(data, requires_grad=True, name=name)

    def normal(self, name: str, shape, std: float) -> Tensor:
        return Tensor(keyed_rng(self.seed, name).normal(0.0, std, size=shape), requires_grad=True, name=name)

    def zeros(self, name: str, shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True, name=name)

    def ones(self, name: str, shape) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True, name=name)


class Module:
    """Container whose tensor / module attributes are discovered by name."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(path + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise DimensionError(f"parameter {k}: model shape {p.shape} vs checkpoint shape {state[k].shape}")
            p.data = np.array(state[k], dtype=DTYPE)


# Checkpoint layout (all integers little-endian):
#   magic  b"TCTCKPT\0"            8 bytes
#   version                        u32 (currently 1)
#   record count                   u32
#   per record:
#     name length, name (utf-8)    u16, bytes
#     ndim, dims                   u8, ndim x u64
#     data                         prod(dims) x float64, row-major
CKPT_MAGIC = b"TCTCKPT\0"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    pos, state = 16, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + nlen].decode("utf-8")
        pos += 2 + nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos + 1)
        pos += 1 + 8 * ndim
        count_f = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(buf, dtype="<f8", count=count_f, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * count_f
    return state
