"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every primitive accepts either plain ndarrays or Nodes and returns a Node
only when at least one input is a Node, so the same forward code serves both
plain inference and gradient computation. Gradients accumulate on leaf Nodes
after calling backward() on a scalar output.
"""

from __future__ import annotations

import numpy as np


class Node:
    """A value in the computation graph with its local backward rules."""

    __slots__ = ("value", "grad", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.vjps = vjps

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def leaf(value: np.ndarray) -> Node:
    return Node(np.asarray(value))


def val(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x)


def _tracked(*xs) -> bool:
    return any(isinstance(x, Node) for x in xs)


def _make(out, pairs) -> Node:
    parents = tuple(p for p, _ in pairs if isinstance(p, Node))
    vjps = tuple(v for p, v in pairs if isinstance(p, Node))
    return Node(out, parents, vjps)


def backward(out: Node) -> None:
    """Accumulate gradients of a scalar ``out`` into every reachable Node."""
    if out.value.ndim != 0 and out.value.size != 1:
        raise ValueError("backward requires a scalar output")

    # Iterative topological order; graphs can be deep at long sequence lengths.
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = np.array(contrib, copy=True)
            else:
                parent.grad += contrib


# ---- primitives ----

def add(a, b):
    out = val(a) + val(b)
    if not _tracked(a, b):
        return out
    return _make(out, [(a, lambda g: g), (b, lambda g: g)])


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv
    if not _tracked(a, b):
        return out
    return _make(out, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def scale_const(a, c: float):
    out = val(a) * c
    if not _tracked(a):
        return out
    return _make(out, [(a, lambda g: g * c)])


def matmul(a, b):
    av, bv = val(a), val(b)
    out = av @ bv
    if not _tracked(a, b):
        return out
    return _make(out, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def matvec(w, x):
    """(m, n) @ (n,) -> (m,)."""
    wv, xv = val(w), val(x)
    out = wv @ xv
    if not _tracked(w, x):
        return out
    return _make(out, [(w, lambda g: np.outer(g, xv)), (x, lambda g: wv.T @ g)])


def transpose(a):
    out = val(a).T
    if not _tracked(a):
        return out
    return _make(out, [(a, lambda g: g.T)])


def row(a, i: int):
    out = val(a)[i]
    if not _tracked(a):
        return out

    def vjp(g):
        full = np.zeros_like(val(a))
        full[i] = g
        return full

    return _make(out, [(a, vjp)])


def stack_rows(rows):
    vals = [val(r) for r in rows]
    out = np.stack(vals)
    if not _tracked(*rows):
        return out
    pairs = [(r, (lambda i: lambda g: g[i])(i)) for i, r in enumerate(rows)]
    return _make(out, pairs)


def slice_cols(a, j0: int, j1: int):
    av = val(a)
    out = av[:, j0:j1]
    if not _tracked(a):
        return out

    def vjp(g):
        full = np.zeros_like(av)
        full[:, j0:j1] = g
        return full

    return _make(out, [(a, vjp)])


def concat_cols(parts):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    if not _tracked(*parts):
        return out
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])
    pairs = [(p, (lambda j0, j1: lambda g: g[:, j0:j1])(offsets[i], offsets[i + 1]))
             for i, p in enumerate(parts)]
    return _make(out, pairs)


def gather_rows(table, ids):
    """Row lookup (embedding): (V, d)[ids] -> (T, d)."""
    tv = val(table)
    ids = np.asarray(ids)
    out = tv[ids]
    if not _tracked(table):
        return out

    def vjp(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids, g)
        return full

    return _make(out, [(table, vjp)])


def gather1d(v, idx):
    vv = val(v)
    idx = np.asarray(idx)
    out = vv[idx]
    if not _tracked(v):
        return out

    def vjp(g):
        full = np.zeros_like(vv)
        np.add.at(full, idx, g)
        return full

    return _make(out, [(v, vjp)])


def index1(v, i: int):
    out = val(v)[i]
    if not _tracked(v):
        return out

    def vjp(g):
        full = np.zeros_like(val(v))
        full[i] = g
        return full

    return _make(out, [(v, vjp)])


def silu(x):
    xv = val(x)
    sig = 1.0 / (1.0 + np.exp(-xv))
    out = xv * sig
    if not _tracked(x):
        return out
    return _make(out, [(x, lambda g: g * (sig + xv * sig * (1.0 - sig)))])


def rmsnorm(x, weight, eps: float):
    """Row-wise RMS normalization with a constant gain vector."""
    xv = val(x)
    w = val(weight)
    ms = np.mean(np.square(xv), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    out = xv * inv * w
    if not _tracked(x):
        return out
    d = xv.shape[-1]

    def vjp(g):
        gw = g * w
        # d/dx of x * inv: inv * gw - x * (x . gw) * inv^3 / d
        dot = np.sum(gw * xv, axis=-1, keepdims=True)
        return inv * gw - xv * dot * inv ** 3 / d

    return _make(out, [(x, vjp)])


def rotary(x, cos, sin):
    """Rotate pairs (i, i + d/2) of each row by position-dependent angles.

    ``x`` is (T, d) with even d; ``cos``/``sin`` are constant (T, d/2).
    """
    xv = val(x)
    half = xv.shape[-1] // 2
    x1, x2 = xv[:, :half], xv[:, half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
    if not _tracked(x):
        return out

    def vjp(g):
        g1, g2 = g[:, :half], g[:, half:]
        return np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1)

    return _make(out, [(x, vjp)])


def causal_softmax(scores):
    """Row-wise softmax of (T, T) attention scores with a causal mask:
    position i attends to positions j <= i."""
    sv = val(scores)
    t = sv.shape[0]
    mask = np.tril(np.ones((t, t), dtype=bool))
    shifted = np.where(mask, sv, -np.inf)
    shifted = shifted - np.max(shifted, axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / np.sum(e, axis=-1, keepdims=True)
    if not _tracked(scores):
        return probs

    def vjp(g):
        dot = np.sum(g * probs, axis=-1, keepdims=True)
        return (g - dot) * probs

    return _make(probs, [(scores, vjp)])


def softmax1d(v):
    vv = val(v)
    shifted = vv - np.max(vv)
    e = np.exp(shifted)
    out = e / np.sum(e)
    if not _tracked(v):
        return out

    def vjp(g):
        return (g - np.sum(g * out)) * out

    return _make(out, [(v, vjp)])


def weighted_sum(weights, vectors):
    """sum_k weights[k] * vectors[k] for a (K,) weight vector and K same-shape
    arrays; differentiable in both the weights and the vectors."""
    wv = val(weights)
    vals = [val(v) for v in vectors]
    out = sum(wv[k] * vals[k] for k in range(len(vals)))
    if not _tracked(weights, *vectors):
        return out
    pairs = []
    if isinstance(weights, Node):
        pairs.append((weights, lambda g: np.array([np.sum(g * v) for v in vals])))
    for k, vec in enumerate(vectors):
        pairs.append((vec, (lambda kk: lambda g: g * wv[kk])(k)))
    return _make(out, pairs)


def masked_ce(logits, targets, mask):
    """Mean negative log-softmax probability of ``targets`` over positions
    where ``mask`` is true. Returns a scalar."""
    lv = val(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("all positions masked out")
    shifted = lv - np.max(lv, axis=-1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=-1))
    nll = logz - shifted[np.arange(lv.shape[0]), targets]
    out = np.asarray(np.sum(nll * mask) / n)
    if not _tracked(logits):
        return out

    probs = np.exp(shifted - logz[:, None])

    def vjp(g):
        d = probs.copy()
        d[np.arange(lv.shape[0]), targets] -= 1.0
        d *= (mask[:, None] * (float(g) / n))
        return d

    return _make(out, [(logits, vjp)])
