"""Reverse-mode differentiation over a fixed set of dense float64 matrix ops.

Every op is a method on :class:`Tape`.  Nodes are appended in creation
order, so the node list is already topologically sorted and ``backward``
just walks it in reverse.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from cdnrec.errors import NonFiniteError, ShapeError


class Node:
    __slots__ = ("value", "grad", "requires_grad", "_backward", "param_name")

    def __init__(self, value: np.ndarray, requires_grad: bool, backward=None, param_name=None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[np.ndarray], None]] = backward
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" param={self.param_name}" if self.param_name else ""
        return f"Node(shape={self.value.shape}{tag})"


class ParamStore:
    """Named parameter arrays with matching gradient accumulators."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        out.frozen = set(self.frozen)
        return out

    def without(self, prefix: str) -> "ParamStore":
        """Copy with every slot whose name starts with ``prefix`` removed."""
        out = ParamStore()
        for name, value in self.params.items():
            if not name.startswith(prefix):
                out.add(name, value.copy())
        return out

    def freeze(self, prefixes: Iterable[str]) -> None:
        prefixes = tuple(prefixes)
        self.frozen = {n for n in self.params if n.startswith(prefixes)} if prefixes else set()

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(v.size for n, v in self.params.items() if n.startswith(prefix)))


def _acc(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def scatter_rows(shape: tuple[int, int], index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``out[index[j]] += values[j]`` into a zero array, summing each row's
    contributions in their original order."""
    out = np.zeros(shape)
    if index.size == 0:
        return out
    if index.size == 1 or np.all(index[1:] > index[:-1]):
        # strictly increasing, so no row receives two contributions
        out[index] = values
        return out
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.flatnonzero(np.concatenate(([True], idx[1:] != idx[:-1])))
    out[idx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def _check2d(op: str, *nodes: Node) -> None:
    for n in nodes:
        if n.value.ndim != 2:
            raise ShapeError(f"{op}: expected 2-d operands, got shapes {[m.value.shape for m in nodes]}")


class Tape:
    """Records ops for one forward pass; ``backward`` fills the bound store's grads.

    ``relu_masks`` keeps the activation pattern of every relu so the gradient
    checker can tell when a finite-difference probe crossed a kink.
    """

    def __init__(self, store: Optional[ParamStore] = None):
        self.store = store
        self.nodes: list[Node] = []
        self.relu_masks: list[np.ndarray] = []
        self._param_nodes: dict[str, Node] = {}

    def _push(self, value, parents: Sequence[Node], backward) -> Node:
        requires = any(p.requires_grad for p in parents)
        node = Node(value, requires, backward if requires else None)
        self.nodes.append(node)
        return node

    # -- leaves -------------------------------------------------------------

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            if self.store is None:
                raise KeyError(f"tape has no parameter store; cannot read {name!r}")
            node = Node(self.store.params[name], True, None, param_name=name)
            self.nodes.append(node)
            self._param_nodes[name] = node
        return node

    def const(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        node = Node(value, False)
        self.nodes.append(node)
        return node

    def _as_node(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    def stop_gradient(self, x: Node) -> Node:
        return self.const(x.value)

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        _check2d("matmul", a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
        av, bv = a.value, b.value

        def backward(g):
            if a.requires_grad:
                _acc(a, g @ bv.T)
            if b.requires_grad:
                _acc(b, av.T @ g)

        return self._push(av @ bv, (a, b), backward)

    def dense(self, x: Node, w: Node, b: Node) -> Node:
        """``x @ w + b`` as one op (an affine layer)."""
        x, w, b = self._as_node(x), self._as_node(w), self._as_node(b)
        _check2d("dense", x, w)
        if x.shape[1] != w.shape[0] or b.value.size != w.shape[1]:
            raise ShapeError(f"dense: {x.shape} @ {w.shape} + {b.shape} does not fit")
        xv, wv, bshape = x.value, w.value, b.shape
        out = xv @ wv
        out += b.value.reshape(1, -1)

        def backward(g):
            if x.requires_grad:
                _acc(x, g @ wv.T)
            if w.requires_grad:
                _acc(w, xv.T @ g)
            if b.requires_grad:
                _acc(b, g.sum(axis=0).reshape(bshape))

        return self._push(out, (x, w, b), backward)

    def matmul_t(self, a: Node, b: Node) -> Node:
        """``a @ b.T``; the in-batch logit matrix of two embedding blocks."""
        a, b = self._as_node(a), self._as_node(b)
        _check2d("matmul_t", a, b)
        if a.shape[1] != b.shape[1]:
            raise ShapeError(f"matmul_t: column counts differ, {a.shape} vs {b.shape}")
        av, bv = a.value, b.value

        def backward(g):
            if a.requires_grad:
                _acc(a, g @ bv)
            if b.requires_grad:
                _acc(b, g.T @ av)

        return self._push(av @ bv.T, (a, b), backward)

    def add(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")

        def backward(g):
            _acc(a, g)
            _acc(b, g)

        return self._push(a.value + b.value, (a, b), backward)

    def add_bias(self, x: Node, b: Node) -> Node:
        """Add a row vector (shape ``(C,)`` or ``(1, C)``) to every row of ``x``."""
        x, b = self._as_node(x), self._as_node(b)
        _check2d("add_bias", x)
        if b.value.size != x.shape[1]:
            raise ShapeError(f"add_bias: bias of shape {b.shape} does not fit {x.shape}")
        bshape = b.shape

        def backward(g):
            _acc(x, g)
            _acc(b, g.sum(axis=0).reshape(bshape))

        return self._push(x.value + b.value.reshape(1, -1), (x, b), backward)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        self.relu_masks.append(mask)

        def backward(g):
            _acc(x, g * mask)

        return self._push(np.maximum(x.value, 0.0), (x,), backward)

    def concat_rows(self, *xs: Node) -> Node:
        """Join blocks side by side: row r of the result is the concatenation of every input's row r."""
        xs = tuple(self._as_node(x) for x in xs)
        _check2d("concat_rows", *xs)
        rows = {x.shape[0] for x in xs}
        if len(rows) != 1:
            raise ShapeError(f"concat_rows: row counts differ, {[x.shape for x in xs]}")
        widths = [x.shape[1] for x in xs]
        bounds = np.cumsum([0] + widths)

        def backward(g):
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                _acc(x, g[:, lo:hi])

        return self._push(np.concatenate([x.value for x in xs], axis=1), xs, backward)

    def gather_rows(self, table: Node, index) -> Node:
        """Embedding lookup.  The table gradient is nonzero only on gathered rows."""
        _check2d("gather_rows", table)
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 1:
            raise ShapeError(f"gather_rows: index must be 1-d, got shape {index.shape}")
        if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
            raise IndexError(f"gather_rows: index out of range for table with {table.shape[0]} rows")
        tshape = table.shape

        def backward(g):
            _acc(table, scatter_rows(tshape, index, g))

        return self._push(table.value[index], (table,), backward)

    def embedding_bag(self, table: Node, values: np.ndarray, offsets: np.ndarray, rows) -> Node:
        """Mean-pool table rows over ragged bags.

        Bag ``k`` holds ``values[offsets[k]:offsets[k+1]]``; the output row for
        ``rows[j]`` is the mean of its bag's embeddings (zero for an empty bag).
        """
        _check2d("embedding_bag", table)
        rows = np.asarray(rows, dtype=np.int64)
        starts = offsets[rows]
        lengths = offsets[rows + 1] - starts
        total = int(lengths.sum())
        seg = np.repeat(np.arange(rows.size), lengths)
        pos = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths) + np.repeat(starts, lengths)
        idx = values[pos]
        inv = 1.0 / np.maximum(lengths, 1).astype(np.float64)
        out = scatter_rows((rows.size, table.shape[1]), seg, table.value[idx])
        out *= inv[:, None]
        tshape = table.shape

        def backward(g):
            _acc(table, scatter_rows(tshape, idx, (g * inv[:, None])[seg]))

        return self._push(out, (table,), backward)

    def scale(self, x: Node, c: float) -> Node:
        x = self._as_node(x)
        c = float(c)
        return self._push(x.value * c, (x,), lambda g: _acc(x, g * c))

    def add_scalar(self, x: Node, c: float) -> Node:
        x = self._as_node(x)
        return self._push(x.value + float(c), (x,), lambda g: _acc(x, g))

    def mul_rows(self, x: Node, w: Node) -> Node:
        """Scale row r of ``x`` by ``w[r]`` (``w`` has shape ``(R, 1)``)."""
        x, w = self._as_node(x), self._as_node(w)
        _check2d("mul_rows", x, w)
        if w.shape != (x.shape[0], 1):
            raise ShapeError(f"mul_rows: weights of shape {w.shape} do not fit {x.shape}")
        xv, wv = x.value, w.value

        def backward(g):
            _acc(x, g * wv)
            _acc(w, (g * xv).sum(axis=1, keepdims=True))

        return self._push(xv * wv, (x, w), backward)

    def rows(self, x: Node, start: int, stop: int) -> Node:
        _check2d("rows", x)
        xshape = x.shape

        def backward(g):
            full = np.zeros(xshape)
            full[start:stop] = g
            _acc(x, full)

        return self._push(x.value[start:stop], (x,), backward)

    def stack_rows(self, *xs: Node) -> Node:
        """Stack blocks vertically (same column count)."""
        xs = tuple(self._as_node(x) for x in xs)
        _check2d("stack_rows", *xs)
        if len({x.shape[1] for x in xs}) != 1:
            raise ShapeError(f"stack_rows: column counts differ, {[x.shape for x in xs]}")
        bounds = np.cumsum([0] + [x.shape[0] for x in xs])

        def backward(g):
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                _acc(x, g[lo:hi])

        return self._push(np.concatenate([x.value for x in xs], axis=0), xs, backward)

    def columns(self, x: Node, start: int, stop: int) -> Node:
        _check2d("columns", x)
        xshape = x.shape

        def backward(g):
            full = np.zeros(xshape)
            full[:, start:stop] = g
            _acc(x, full)

        return self._push(x.value[:, start:stop], (x,), backward)

    def softmax(self, x: Node) -> Node:
        """Row-wise softmax."""
        _check2d("softmax", x)
        z = x.value - x.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            _acc(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

        return self._push(p, (x,), backward)

    def softmax_xent(self, logits: Node, targets=None, weights=None) -> Node:
        """Weighted mean of ``-log softmax(logits[r])[targets[r]]`` over rows.

        ``targets`` defaults to the diagonal (row r's positive is column r),
        which is the in-batch softmax layout.
        """
        logits = self._as_node(logits)
        _check2d("softmax_xent", logits)
        lv = logits.value
        if not np.all(np.isfinite(lv)):
            raise NonFiniteError("softmax_xent: non-finite logits")
        n_rows = lv.shape[0]
        if targets is None:
            if lv.shape[0] != lv.shape[1]:
                raise ShapeError(f"softmax_xent: in-batch logits must be square, got {lv.shape}")
            targets = np.arange(n_rows)
        targets = np.asarray(targets, dtype=np.int64)
        if weights is None:
            w = np.ones(n_rows)
        else:
            w = np.asarray(weights, dtype=np.float64).reshape(-1)
            if w.shape != (n_rows,):
                raise ShapeError(f"softmax_xent: {w.size} weights for {n_rows} rows")
            if np.any(w < 0):
                raise ValueError("softmax_xent: weights must be non-negative")
        wsum = w.sum()
        if wsum <= 0:
            raise ValueError("softmax_xent: weights sum to zero")
        m = lv.max(axis=1, keepdims=True)
        z = lv - m
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        rows = np.arange(n_rows)
        loss = -(w * logp[rows, targets]).sum() / wsum

        def backward(g):
            p = np.exp(logp, out=logp)
            p[rows, targets] -= 1.0
            _acc(logits, g * p * (w / wsum)[:, None])

        return self._push(np.asarray(loss), (logits,), backward)

    # -- reverse pass ---------------------------------------------------------

    def backward(self, loss: Node) -> None:
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        if self.store is None:
            return
        for name, node in self._param_nodes.items():
            if node.grad is not None:
                self.store.grads[name] += node.grad
