"""Dense numeric kernel: 2-D float64 tensors with explicit forward/backward.

Every differentiable operation is a node in a reverse-mode tape over a fixed
op vocabulary (matmul, broadcast add/mul, relu, sigmoid, row softmax, log,
reductions, slicing, concatenation, row gather, fused cross-entropy).  The
layer functions at the bottom of the module (linear, cross_attention, gasa,
ffn) compose these ops; `grad_check` verifies any composition against central
finite differences, which is the ground truth this module is held to.

Double precision throughout: finite-difference verification beats speed at
this scale.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


def _as_2d(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise ValueError(f"Tensor data must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and out.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


class Tensor:
    """2-D float64 array plus gradient buffer and backward closure.

    `requires_grad` marks leaves (parameters); interior nodes inherit it from
    their parents.  Gradients accumulate into `.grad` on `backward()` and are
    cleared with `zero_grad()` between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple["Tensor", ...] = (), backward=None):
        self.data = _as_2d(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar (1x1) node."""
        if self.shape != (1, 1):
            raise ValueError("backward() requires a scalar (1x1) tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones((1, 1)))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic sugar ---------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- core ops ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor(out_data, parents=(a, b), backward=bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward=bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * s)

    return Tensor(out_data, parents=(a,), backward=bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out_data = np.where(mask, a.data, 0.0)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * mask)

    return Tensor(out_data, parents=(a,), backward=bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g * out_data * (1.0 - out_data))

    return Tensor(out_data, parents=(a,), backward=bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g / a.data)

    return Tensor(out_data, parents=(a,), backward=bwd)


def softmax_row(a: Tensor) -> Tensor:
    """Row-wise softmax, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            dot = (g * p).sum(axis=1, keepdims=True)
            a._accum(p * (g - dot))

    return Tensor(p, parents=(a,), backward=bwd)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.array([[a.data.sum()]])

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(np.full(a.shape, g[0, 0]))

    return Tensor(out_data, parents=(a,), backward=bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.array([[a.data.sum() / n]])

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(np.full(a.shape, g[0, 0] / n))

    return Tensor(out_data, parents=(a,), backward=bwd)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows -> 1 x cols."""
    n = a.rows
    out_data = a.data.mean(axis=0, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(np.repeat(g / n, n, axis=0))

    return Tensor(out_data, parents=(a,), backward=bwd)


def transpose(a: Tensor) -> Tensor:
    out_data = a.data.T.copy()

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(g.T)

    return Tensor(out_data, parents=(a,), backward=bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[start:stop].copy()

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[start:stop] = g
            a._accum(full)

    return Tensor(out_data, parents=(a,), backward=bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[:, start:stop].copy()

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[:, start:stop] = g
            a._accum(full)

    return Tensor(out_data, parents=(a,), backward=bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[lo:hi])

    return Tensor(out_data, parents=parts, backward=bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def bwd(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[:, lo:hi])

    return Tensor(out_data, parents=parts, backward=bwd)


def take_rows(table: Tensor, idx: Sequence[int]) -> Tensor:
    """Gather rows by index (embedding lookup); backward scatter-adds."""
    idx = list(int(i) for i in idx)
    out_data = table.data[idx].copy()

    def bwd(g: np.ndarray) -> None:
        if table.requires_grad:
            full = np.zeros(table.shape)
            np.add.at(full, idx, g)
            table._accum(full)

    return Tensor(out_data, parents=(table,), backward=bwd)


def pick(a: Tensor, row: int, col: int) -> Tensor:
    out_data = np.array([[a.data[row, col]]])

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[row, col] = g[0, 0]
            a._accum(full)

    return Tensor(out_data, parents=(a,), backward=bwd)


def cross_entropy_logits(scores: Tensor, target: int) -> Tensor:
    """-log softmax(scores)[0, target] for a 1 x C score row, fused for stability."""
    z = scores.data - scores.data.max()
    e = np.exp(z)
    p = e / e.sum()
    out_data = np.array([[-(z[0, target] - np.log(e.sum()))]])

    def bwd(g: np.ndarray) -> None:
        if scores.requires_grad:
            grad = p.copy()
            grad[0, target] -= 1.0
            scores._accum(g[0, 0] * grad)

    return Tensor(out_data, parents=(scores,), backward=bwd)


# -- parameter containers -----------------------------------------------------


class ParamBlock:
    """Named map of parameter tensors with matching gradient buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = parameter(data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            arr = _as_2d(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k!r}: {arr.shape} vs {t.shape}")
            t.data = arr


def save_params(path: str, params: ParamBlock, header: dict | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "header": header or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.items()
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_params(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    state = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return doc.get("header", {}), state


# -- layers -------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def _split_heads(w: Tensor, n_heads: int) -> list[Tensor]:
    d = w.cols
    if d % n_heads:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    return [slice_cols(w, h * dh, (h + 1) * dh) for h in range(n_heads)]


def cross_attention(x_q: Tensor, x_kv: Tensor, w_q: Tensor, w_k: Tensor,
                    w_v: Tensor, n_heads: int = 1, bias: Tensor | None = None,
                    q_override: Tensor | None = None,
                    k_override: Tensor | None = None,
                    v_override: Tensor | None = None) -> Tensor:
    """softmax(x_q Wq (x_kv Wk)^T / sqrt(d_head)) x_kv Wv, per head.

    `bias` is an additive pre-softmax term shared across heads (attention
    masks, spatial affinity).  The `*_override` tensors replace the plain
    projections when a projection is produced elsewhere (expert mixtures).
    """
    q = q_override if q_override is not None else matmul(x_q, w_q)
    k = k_override if k_override is not None else matmul(x_kv, w_k)
    v = v_override if v_override is not None else matmul(x_kv, w_v)
    if q.cols != k.cols:
        raise ValueError(f"query/key width mismatch: {q.cols} vs {k.cols}")
    dh = q.cols // n_heads
    inv_sqrt = 1.0 / np.sqrt(dh)
    outs = []
    for h in range(n_heads):
        qh = slice_cols(q, h * dh, (h + 1) * dh) if n_heads > 1 else q
        kh = slice_cols(k, h * dh, (h + 1) * dh) if n_heads > 1 else k
        vh = slice_cols(v, h * dh, (h + 1) * dh) if n_heads > 1 else v
        logits = scale(matmul(qh, transpose(kh)), inv_sqrt)
        if bias is not None:
            logits = add(logits, bias)
        attn = softmax_row(logits)
        outs.append(matmul(attn, vh))
    return outs[0] if n_heads == 1 else concat_cols(outs)


def gasa(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, affinity: Tensor,
         n_heads: int = 1) -> Tensor:
    """Self-attention with an additive pre-softmax spatial-affinity bias."""
    if affinity.shape != (x.rows, x.rows):
        raise ValueError(f"affinity must be {x.rows}x{x.rows}, got {affinity.shape}")
    return cross_attention(x, x, w_q, w_k, w_v, n_heads=n_heads, bias=affinity)


def affinity_from_graph(positions: np.ndarray, tau: float = 1.0) -> Tensor:
    """Pairwise-distance bias: A[i,j] = -||p_i - p_j|| / tau, zero diagonal.

    Negated so that nearer nodes receive larger pre-softmax bias; `tau` sets
    the distance scale in meters.
    """
    pos = np.asarray(positions, dtype=np.float64)
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    return constant(-dist / tau)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer feed-forward with ReLU."""
    return linear(relu(linear(x, w1, b1)), w2, b2)


# -- finite-difference verification --------------------------------------------


def grad_check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-5,
               max_coords_per_tensor: int = 0, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    `fn` rebuilds the computation and returns a scalar tensor; `wrt` lists the
    leaves to check.  With `max_coords_per_tensor > 0`, large tensors are
    probed at a deterministic random coordinate subset instead of exhaustively.
    """
    for t in wrt:
        t.zero_grad()
    out = fn()
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in wrt]

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for t, a_grad in zip(wrt, analytic):
        n = t.data.size
        if max_coords_per_tensor and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = fn().item()
            flat[c] = orig - eps
            f_minus = fn().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = a_grad.reshape(-1)[c]
            denom = max(abs(a), abs(numeric))
            if denom < 1e-10:
                continue
            max_rel = max(max_rel, abs(a - numeric) / denom)
    return max_rel
