"""Dense float64 matrices with a define-by-run reverse-mode tape, plus a Jacobi SVD.

Every operation takes and returns :class:`Matrix`. When any input belongs to a
:class:`Tape`, the result is recorded on that tape together with a closure that
maps the output adjoint to the input adjoints. :func:`backward` then walks the
tape in reverse creation order, which is a valid reverse topological order
because a node can only be created after its parents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """Raised when a routine receives NaN or Inf where finite values are required."""


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the bit stream is fixed by numpy for a given seed on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


class Matrix:
    """A 2-D float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Matrix needs 2-D data, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.rows}x{self.cols}")
        return float(self.data[0, 0])

    def detach(self) -> Matrix:
        return Matrix(self.data.copy())

    def copy(self) -> Matrix:
        return Matrix(self.data.copy())

    def __matmul__(self, other: Matrix) -> Matrix:
        return matmul(self, other)

    def __add__(self, other: Matrix) -> Matrix:
        return add(self, other)

    def __repr__(self) -> str:
        tag = " tracked" if self.tracked else ""
        return f"Matrix({self.rows}x{self.cols}{tag})"

    @staticmethod
    def zeros(rows: int, cols: int) -> Matrix:
        return Matrix(np.zeros((rows, cols), dtype=DTYPE))

    @staticmethod
    def identity(n: int) -> Matrix:
        return Matrix(np.eye(n, dtype=DTYPE))

    @staticmethod
    def normal(rows: int, cols: int, std: float, rng: np.random.Generator) -> Matrix:
        return Matrix(rng.standard_normal((rows, cols)) * std)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    parents: tuple[Matrix, ...]
    backward: Backward
    op: str


@dataclass
class Tape:
    """Records one forward pass. Build a fresh tape for every step."""

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Matrix] = field(default_factory=dict)

    def param(self, name: str, m: Matrix) -> Matrix:
        """Register ``m`` as a trainable leaf under ``name``.

        The leaf shares storage with ``m``. Registering the same name twice
        returns the original leaf, so shared weights accumulate one gradient.
        """
        leaf = self.params.get(name)
        if leaf is not None:
            if leaf.data is not m.data:
                raise ValueError(f"parameter name {name!r} already bound to different storage")
            return leaf
        leaf = Matrix(m.data, tape=self)
        self.params[name] = leaf
        return leaf


def _tape_of(parents: Iterable[Matrix]) -> Tape | None:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = p.tape
    return tape


def _record(out: np.ndarray, parents: tuple[Matrix, ...], backward: Backward, op: str) -> Matrix:
    tape = _tape_of(parents)
    if tape is None:
        return Matrix(out)
    tape.nodes.append(Node(parents, backward, op))
    return Matrix(out, tape=tape, node=len(tape.nodes) - 1)


def backward(tape: Tape, loss: Matrix) -> dict[str, Matrix]:
    """Reverse-mode gradients of a scalar ``loss`` for every registered parameter.

    Parameters with no path to ``loss`` get zero matrices.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.rows}x{loss.cols}")
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")

    # node outputs are keyed by node index, leaves by object id
    node_adj: dict[int, np.ndarray] = {}
    leaf_adj: dict[int, np.ndarray] = {}
    seed = np.ones((1, 1), dtype=DTYPE)
    if loss.node is not None:
        node_adj[loss.node] = seed
    else:
        leaf_adj[id(loss)] = seed

    for idx in range(len(tape.nodes) - 1, -1, -1):
        g = node_adj.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or parent.tape is None:
                continue
            if parent.node is not None:
                prev = node_adj.get(parent.node)
                node_adj[parent.node] = pg if prev is None else prev + pg
            else:
                prev = leaf_adj.get(id(parent))
                leaf_adj[id(parent)] = pg if prev is None else prev + pg

    grads: dict[str, Matrix] = {}
    for name, leaf in tape.params.items():
        g = leaf_adj.get(id(leaf))
        grads[name] = Matrix(g.copy() if g is not None else np.zeros_like(leaf.data))
    return grads


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.tracked else None, ad.T @ g if b.tracked else None)

    return _record(ad @ bd, (a, b), bw, "matmul")


def _broadcast_check(a: Matrix, b: Matrix, op: str) -> None:
    if b.shape == a.shape or (b.rows == 1 and b.cols == a.cols):
        return
    raise ShapeError(f"{op} shape mismatch: {a.rows}x{a.cols} and {b.rows}x{b.cols}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``'s rows."""
    _broadcast_check(a, b, "add")
    bshape = b.shape

    def bw(g):
        return (g, _unbroadcast(g, bshape))

    return _record(a.data + b.data, (a, b), bw, "add")


def add_all(terms: Sequence[Matrix]) -> Matrix:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product; ``b`` may be a single row broadcast over rows."""
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (g * bd if a.tracked else None, _unbroadcast(g * ad, bd.shape) if b.tracked else None)

    return _record(ad * bd, (a, b), bw, "mul")


def scale(a: Matrix, s: float) -> Matrix:
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,), "scale")


def transpose(a: Matrix) -> Matrix:
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def take_rows(table: Matrix, index: np.ndarray) -> Matrix:
    """Gather rows ``table[index]``; the adjoint scatter-adds back into the table."""
    index = np.asarray(index, dtype=np.int64).ravel()
    if index.size and (index.min() < 0 or index.max() >= table.rows):
        raise IndexError(f"row index out of range for table with {table.rows} rows")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _record(table.data[index], (table,), bw, "take_rows")


def sum_all(a: Matrix) -> Matrix:
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def softmax_rows(m: Matrix) -> Matrix:
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(y, (m,), bw, "softmax_rows")


def layer_norm(m: Matrix, eps: float = 1e-5) -> Matrix:
    """Per-row standardisation without affine terms; apply gain/bias with :func:`mul`/:func:`add`."""
    x = m.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=1, keepdims=True)
        gym = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _record(y, (m,), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(m: Matrix) -> Matrix:
    """tanh-approximated GELU."""
    x = m.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(y, (m,), bw, "gelu")


def causal_attention(q: Matrix, k: Matrix, v: Matrix, seq: int, n_heads: int) -> Matrix:
    """Multi-head causal self-attention over stacked sequences.

    ``q``, ``k`` and ``v`` are ``(batch*seq, d)``; rows ``[b*seq, (b+1)*seq)`` form
    sequence ``b`` and columns split evenly into ``n_heads`` heads. Returns the
    concatenated head outputs, ``(batch*seq, d)``.
    """
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"attention operands differ: {q.shape}, {k.shape}, {v.shape}")
    n, d = q.shape
    if n % seq or d % n_heads:
        raise ShapeError(f"cannot split {n}x{d} into sequences of {seq} and {n_heads} heads")
    b, dh = n // seq, d // n_heads
    scale_ = 1.0 / math.sqrt(dh)

    def split(x: np.ndarray) -> np.ndarray:
        return x.reshape(b, seq, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(x: np.ndarray) -> np.ndarray:
        return x.transpose(0, 2, 1, 3).reshape(n, d)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale_
    future = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    s = np.where(future, -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)

    def bw(g):
        gh = split(g)
        dv = p.transpose(0, 1, 3, 2) @ gh
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale_
        return (merge(ds @ kh), merge(ds.transpose(0, 1, 3, 2) @ qh), merge(dv))

    return _record(merge(p @ vh), (q, k, v), bw, "causal_attention")


def cross_entropy(logits: Matrix, targets: np.ndarray, mask: np.ndarray | None = None) -> Matrix:
    """Mean negative log-likelihood over rows where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64).ravel()
    if targets.shape[0] != logits.rows:
        raise ShapeError(f"{targets.shape[0]} targets for {logits.rows} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.cols):
        raise IndexError("target id out of vocabulary range")
    w = np.ones(logits.rows) if mask is None else np.asarray(mask, dtype=DTYPE).ravel()
    count = w.sum()
    if count <= 0:
        raise ValueError("cross_entropy needs at least one unmasked row")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(logits.rows)
    nll = lse - z[rows, targets]
    loss = float((nll * w).sum() / count)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (w / count * g[0, 0])[:, None],)

    return _record(np.array([[loss]]), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# SVD


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one cyclic sweep: n-1 rounds of n/2 disjoint index pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array(players[: n // 2])
        q = np.array(players[n // 2:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd_values(m: Matrix | np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Singular values in descending order via one-sided cyclic Jacobi.

    Columns of the thinner orientation are rotated pairwise until the implicit
    Gram matrix is diagonal, i.e. ``||offdiag(G)||_F < tol * ||diag(G)||_F``.
    The Gram matrix is only formed to test convergence, so small singular values
    keep absolute accuracy near ``eps * sigma_max`` instead of ``sqrt(eps)``.
    """
    x = m.data if isinstance(m, Matrix) else np.asarray(m, dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"svd_values needs a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("svd_values received non-finite entries")
    if x.shape[0] < x.shape[1]:
        x = x.T
    u = np.array(x, dtype=DTYPE, copy=True)
    n = u.shape[1]
    if n == 0:
        return np.zeros(0)
    if n % 2:
        u = np.hstack([u, np.zeros((u.shape[0], 1))])
    rounds = _round_robin(u.shape[1])

    for _ in range(max_sweeps):
        gram = u.T @ u
        diag = np.diag(gram)
        off = gram - np.diag(diag)
        dmass = math.sqrt(float(diag @ diag))
        if dmass == 0.0 or math.sqrt(float((off * off).sum())) < tol * dmass:
            break
        for p, q in rounds:
            up, uq = u[:, p], u[:, q]
            alpha = (up * up).sum(axis=0)
            beta = (uq * uq).sum(axis=0)
            gamma = (up * uq).sum(axis=0)
            active = np.abs(gamma) > 1e-300
            safe = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            u[:, p] = c * up - s * uq
            u[:, q] = s * up + c * uq

    # the zero padding column, if any, sorts last and is dropped
    sv = np.sort(np.sqrt((u * u).sum(axis=0)))[::-1][:n]
    return np.ascontiguousarray(sv)
