"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value on the tape is a 2-D row-major ``numpy.float64`` array; scalars
are 1x1 matrices.  A :class:`Tape` records primitive operations eagerly
(values are computed when a node is created) in topological order, so a
single reverse sweep over the node list visits each node exactly once.
Leaves may be updated in place with :meth:`Tape.set_leaf` and the whole
graph re-evaluated with :func:`forward`, which keeps Monte-Carlo sampling
loops free of graph-construction overhead.

Concurrency: a tape is single-writer while it is being built.  Afterwards
``forward``/``backward`` only read node records; ``backward`` keeps its
adjoints in a private buffer, so independent reverse sweeps over one tape
may run concurrently.  Values are treated as immutable once computed.
"""

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf
from scipy.special import expit

from .errors import NotPositiveDefinite, ShapeError

__all__ = [
    "Tape", "Node", "forward", "backward",
    "exp", "log", "tanh", "softplus", "square", "sqrt", "clip_min",
    "matmul", "transpose", "cholesky", "tri_solve", "logsumexp",
    "stop_gradient", "concat_cols", "repeat_rows", "broadcast_to",
    "diag_part", "diag_embed", "tril",
]


def _as_matrix(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


class Node:
    """One record on a tape: an operation, its inputs, and its value."""

    __slots__ = ("tape", "idx", "op", "parents", "value", "extra", "param")

    def __init__(self, tape, idx, op, parents, value, extra=None, param=False):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.value = value
        self.extra = extra
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic sugar ----------------------------------------------

    def __add__(self, other):
        if isinstance(other, Node):
            a, b = _align(self, other)
            return _apply("add", [a, b])
        return _apply("sadd", [self], extra=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            a, b = _align(self, other)
            return _apply("sub", [a, b])
        return _apply("sadd", [self], extra=-float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Node):
            a, b = _align(self, other)
            return _apply("mul", [a, b])
        return _apply("smul", [self], extra=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            a, b = _align(self, other)
            return _apply("div", [a, b])
        return _apply("smul", [self], extra=1.0 / float(other))

    def __neg__(self):
        return _apply("smul", [self], extra=-1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return _apply("sum", [self], extra=axis)

    def mean(self, axis=None):
        return _apply("mean", [self], extra=axis)

    def reshape(self, rows, cols):
        if rows * cols != self.value.size:
            raise ShapeError(f"cannot reshape {self.shape} to {(rows, cols)}")
        return _apply("reshape", [self], extra=(rows, cols))

    def __repr__(self):
        return f"<Node {self.idx} {self.op} {self.shape}>"


class Tape:
    """Append-only sequence of primitive-op records."""

    def __init__(self):
        self.nodes = []

    def _record(self, op, parents, value, extra=None, param=False):
        node = Node(self, len(self.nodes), op, parents, value, extra, param)
        self.nodes.append(node)
        return node

    def leaf(self, value, param=True):
        """Add a settable input node.  ``param=True`` marks it trainable."""
        return self._record("leaf", (), _as_matrix(value), param=param)

    def constant(self, value):
        """Add a fixed value that never receives a gradient."""
        return self._record("const", (), _as_matrix(value))

    def set_leaf(self, node, value):
        """Replace a leaf's value; shape must be unchanged."""
        if node.op != "leaf":
            raise ValueError("set_leaf on a non-leaf node")
        arr = _as_matrix(value)
        if arr.shape != node.value.shape:
            raise ShapeError(f"leaf shape {node.value.shape} != {arr.shape}")
        node.value = arr

    def recompute(self):
        """Re-evaluate every non-leaf node from current leaf values."""
        for node in self.nodes:
            if node.op not in ("leaf", "const"):
                node.value = _FORWARD[node.op](node)

    def params(self):
        return [n for n in self.nodes if n.op == "leaf" and n.param]


def _apply(op, parents, extra=None):
    tape = parents[0].tape
    for p in parents[1:]:
        if p.tape is not tape:
            raise ValueError("nodes belong to different tapes")
    node = Node(tape, len(tape.nodes), op, tuple(parents), None, extra)
    node.value = _FORWARD[op](node)
    tape.nodes.append(node)
    return node


def _align(a, b):
    """Insert broadcast nodes so two operands share a shape."""
    if a.shape == b.shape:
        return a, b
    rows = max(a.shape[0], b.shape[0])
    cols = max(a.shape[1], b.shape[1])
    target = (rows, cols)
    a2 = a if a.shape == target else broadcast_to(a, target)
    b2 = b if b.shape == target else broadcast_to(b, target)
    return a2, b2


# ---------------------------------------------------------------------------
# forward rules
# ---------------------------------------------------------------------------

def _fwd_add(n):
    return n.parents[0].value + n.parents[1].value


def _fwd_sub(n):
    return n.parents[0].value - n.parents[1].value


def _fwd_mul(n):
    return n.parents[0].value * n.parents[1].value


def _fwd_div(n):
    return n.parents[0].value / n.parents[1].value


def _fwd_smul(n):
    return n.parents[0].value * n.extra


def _fwd_sadd(n):
    return n.parents[0].value + n.extra


def _fwd_matmul(n):
    return n.parents[0].value @ n.parents[1].value


def _fwd_transpose(n):
    return np.ascontiguousarray(n.parents[0].value.T)


def _fwd_exp(n):
    return np.exp(n.parents[0].value)


def _fwd_log(n):
    return np.log(n.parents[0].value)


def _fwd_tanh(n):
    return np.tanh(n.parents[0].value)


def _fwd_softplus(n):
    return np.logaddexp(0.0, n.parents[0].value)


def _fwd_square(n):
    return np.square(n.parents[0].value)


def _fwd_sqrt(n):
    return np.sqrt(n.parents[0].value)


def _fwd_clip_min(n):
    return np.maximum(n.parents[0].value, n.extra)


def _fwd_sum(n):
    x = n.parents[0].value
    if n.extra is None:
        return x.sum().reshape(1, 1)
    return np.sum(x, axis=n.extra, keepdims=True)


def _fwd_mean(n):
    x = n.parents[0].value
    if n.extra is None:
        return x.mean().reshape(1, 1)
    return np.mean(x, axis=n.extra, keepdims=True)


def _fwd_broadcast(n):
    return np.broadcast_to(n.parents[0].value, n.extra).copy()


def _fwd_repeat_rows(n):
    return np.repeat(n.parents[0].value, n.extra, axis=0)


def _fwd_concat_cols(n):
    return np.concatenate([p.value for p in n.parents], axis=1)


def _fwd_slice(n):
    r0, r1, c0, c1 = n.extra
    return n.parents[0].value[r0:r1, c0:c1].copy()


def _fwd_reshape(n):
    return n.parents[0].value.reshape(n.extra)


def _fwd_diag_part(n):
    return np.diag(n.parents[0].value).reshape(-1, 1).copy()


def _fwd_diag_embed(n):
    return np.diag(n.parents[0].value[:, 0])


def _fwd_tril(n):
    return np.tril(n.parents[0].value, n.extra)


def _fwd_cholesky(n):
    a = n.parents[0].value
    c, info = dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise NotPositiveDefinite(info if info > 0 else -info)
    return c


def _fwd_tri_solve(n):
    lmat, b = n.parents[0].value, n.parents[1].value
    return solve_triangular(lmat, b, lower=True,
                            trans="T" if n.extra else "N", check_finite=False)


def _fwd_logsumexp(n):
    x = n.parents[0].value
    axis = n.extra
    m = np.max(x, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def _fwd_stop_gradient(n):
    return n.parents[0].value


_FORWARD = {
    "add": _fwd_add, "sub": _fwd_sub, "mul": _fwd_mul, "div": _fwd_div,
    "smul": _fwd_smul, "sadd": _fwd_sadd,
    "matmul": _fwd_matmul, "transpose": _fwd_transpose,
    "exp": _fwd_exp, "log": _fwd_log, "tanh": _fwd_tanh,
    "softplus": _fwd_softplus, "square": _fwd_square, "sqrt": _fwd_sqrt,
    "clip_min": _fwd_clip_min,
    "sum": _fwd_sum, "mean": _fwd_mean,
    "broadcast": _fwd_broadcast, "repeat_rows": _fwd_repeat_rows,
    "concat_cols": _fwd_concat_cols, "slice": _fwd_slice,
    "reshape": _fwd_reshape,
    "diag_part": _fwd_diag_part, "diag_embed": _fwd_diag_embed,
    "tril": _fwd_tril,
    "cholesky": _fwd_cholesky, "tri_solve": _fwd_tri_solve,
    "logsumexp": _fwd_logsumexp, "stop_gradient": _fwd_stop_gradient,
}


# ---------------------------------------------------------------------------
# public op constructors
# ---------------------------------------------------------------------------

def exp(x):
    return _apply("exp", [x])


def log(x):
    return _apply("log", [x])


def tanh(x):
    return _apply("tanh", [x])


def softplus(x):
    return _apply("softplus", [x])


def square(x):
    return _apply("square", [x])


def sqrt(x):
    return _apply("sqrt", [x])


def clip_min(x, floor):
    """Elementwise max(x, floor); the clipped region gets zero gradient."""
    return _apply("clip_min", [x], extra=float(floor))


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} x {b.shape}")
    return _apply("matmul", [a, b])


def transpose(x):
    return _apply("transpose", [x])


def cholesky(x):
    """Lower Cholesky factor; only the lower triangle of x is read."""
    if x.shape[0] != x.shape[1]:
        raise ShapeError(f"cholesky of non-square {x.shape}")
    return _apply("cholesky", [x])


def tri_solve(lmat, b, trans=False):
    """Solve L x = b (or L^T x = b when trans) with L lower-triangular."""
    if lmat.shape[0] != lmat.shape[1] or lmat.shape[0] != b.shape[0]:
        raise ShapeError(f"tri_solve {lmat.shape} x {b.shape}")
    return _apply("tri_solve", [lmat, b], extra=bool(trans))


def logsumexp(x, axis):
    """Overflow-safe log-sum-exp along a designated axis (0 or 1)."""
    if axis not in (0, 1):
        raise ShapeError("logsumexp axis must be 0 or 1")
    return _apply("logsumexp", [x], extra=axis)


def stop_gradient(x):
    """Identity in the forward pass; blocks the reverse sweep."""
    return _apply("stop_gradient", [x])


def concat_cols(nodes):
    rows = nodes[0].shape[0]
    for m in nodes[1:]:
        if m.shape[0] != rows:
            raise ShapeError("concat_cols row mismatch")
    return _apply("concat_cols", list(nodes))


def slice_block(x, r0, r1, c0, c1):
    return _apply("slice", [x], extra=(r0, r1, c0, c1))


def repeat_rows(x, times):
    """Repeat each row ``times`` consecutive times."""
    return _apply("repeat_rows", [x], extra=int(times))


def broadcast_to(x, shape):
    r, c = x.shape
    if (r not in (1, shape[0])) or (c not in (1, shape[1])):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    return _apply("broadcast", [x], extra=tuple(shape))


def diag_part(x):
    if x.shape[0] != x.shape[1]:
        raise ShapeError("diag_part of non-square matrix")
    return _apply("diag_part", [x])


def diag_embed(x):
    if x.shape[1] != 1:
        raise ShapeError("diag_embed expects a column vector")
    return _apply("diag_embed", [x])


def tril(x, k=0):
    return _apply("tril", [x], extra=int(k))


# ---------------------------------------------------------------------------
# reverse rules
# ---------------------------------------------------------------------------

def _unbroadcast(adj, shape):
    """Sum an adjoint back down to a broadcast source shape."""
    if adj.shape == shape:
        return adj
    out = adj
    if shape[0] == 1 and adj.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and adj.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _phi(x):
    """Lower triangle with the diagonal halved (Cholesky pullback helper)."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _vjp_cholesky(n, adj):
    # Reverse-mode rule for the lower Cholesky factor (Murray 2016).  The
    # result lives entirely in the lower triangle, matching LAPACK's
    # convention that only the lower triangle of the input is read.
    lmat = n.value
    p = _phi(lmat.T @ adj)
    s = p + p.T
    tmp = solve_triangular(lmat, s, lower=True, trans="T", check_finite=False)
    m = solve_triangular(lmat, tmp.T, lower=True, trans="T",
                         check_finite=False).T
    return [_phi(m)]


def _vjp_tri_solve(n, adj):
    lmat = n.parents[0].value
    x = n.value
    if not n.extra:                       # L x = b
        badj = solve_triangular(lmat, adj, lower=True, trans="T",
                                check_finite=False)
        ladj = -np.tril(badj @ x.T)
    else:                                 # L^T x = b
        badj = solve_triangular(lmat, adj, lower=True, trans="N",
                                check_finite=False)
        ladj = -np.tril(x @ badj.T)
    return [ladj, badj]


def _vjp_logsumexp(n, adj):
    x = n.parents[0].value
    soft = np.exp(x - n.value)
    return [soft * adj]


_TWO_ARG = {"add", "sub", "mul", "div", "matmul", "tri_solve"}


def _vjp(node, adj):
    """Return adjoints for the parents of ``node`` (None = no gradient)."""
    op = node.op
    p = node.parents
    if op == "add":
        return [adj, adj]
    if op == "sub":
        return [adj, -adj]
    if op == "mul":
        return [adj * p[1].value, adj * p[0].value]
    if op == "div":
        return [adj / p[1].value, -adj * node.value / p[1].value]
    if op == "smul":
        return [adj * node.extra]
    if op == "sadd":
        return [adj]
    if op == "matmul":
        return [adj @ p[1].value.T, p[0].value.T @ adj]
    if op == "transpose":
        return [adj.T]
    if op == "exp":
        return [adj * node.value]
    if op == "log":
        return [adj / p[0].value]
    if op == "tanh":
        return [adj * (1.0 - np.square(node.value))]
    if op == "softplus":
        return [adj * expit(p[0].value)]
    if op == "square":
        return [2.0 * adj * p[0].value]
    if op == "sqrt":
        return [adj * 0.5 / node.value]
    if op == "clip_min":
        return [adj * (p[0].value > node.extra)]
    if op == "sum":
        return [np.broadcast_to(adj, p[0].value.shape)]
    if op == "mean":
        if node.extra is None:
            scale = p[0].value.size
        else:
            scale = p[0].value.shape[node.extra]
        return [np.broadcast_to(adj / scale, p[0].value.shape)]
    if op == "broadcast":
        return [_unbroadcast(adj, p[0].value.shape)]
    if op == "repeat_rows":
        rows, cols = p[0].value.shape
        return [adj.reshape(rows, node.extra, cols).sum(axis=1)]
    if op == "concat_cols":
        outs = []
        c = 0
        for parent in p:
            w = parent.value.shape[1]
            outs.append(adj[:, c:c + w])
            c += w
        return outs
    if op == "slice":
        r0, r1, c0, c1 = node.extra
        out = np.zeros_like(p[0].value)
        out[r0:r1, c0:c1] = adj
        return [out]
    if op == "reshape":
        return [adj.reshape(p[0].value.shape)]
    if op == "diag_part":
        return [np.diag(adj[:, 0])]
    if op == "diag_embed":
        return [np.diag(adj).reshape(-1, 1).copy()]
    if op == "tril":
        return [np.tril(adj, node.extra)]
    if op == "cholesky":
        return _vjp_cholesky(node, adj)
    if op == "tri_solve":
        return _vjp_tri_solve(node, adj)
    if op == "logsumexp":
        return _vjp_logsumexp(node, adj)
    if op == "stop_gradient":
        return [None]
    raise AssertionError(f"no reverse rule for op {op!r}")


# ---------------------------------------------------------------------------
# driver functions
# ---------------------------------------------------------------------------

def forward(tape, outputs):
    """Re-evaluate the tape and return the values of ``outputs``.

    Raises :class:`NotPositiveDefinite` if a Cholesky node fails for the
    current leaf values.
    """
    tape.recompute()
    return [o.value for o in outputs]


def backward(tape, output, wrt=None):
    """Gradients of a scalar output with respect to leaves.

    Returns a dict mapping each requested leaf node to an array of its
    shape.  Leaves the output does not depend on get zeros.  ``wrt``
    defaults to every trainable leaf on the tape.
    """
    if output.value.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar output, got {output.value.shape}")
    if wrt is None:
        wrt = tape.params()

    adjoints = {output.idx: np.ones((1, 1))}
    for node in reversed(tape.nodes[: output.idx + 1]):
        adj = adjoints.pop(node.idx, None)
        if adj is None or node.op in ("leaf", "const"):
            if adj is not None and node.op == "leaf":
                adjoints[node.idx] = adj       # keep leaf grads
            continue
        for parent, padj in zip(node.parents, _vjp(node, adj)):
            if padj is None:
                continue
            acc = adjoints.get(parent.idx)
            adjoints[parent.idx] = padj if acc is None else acc + padj

    return {leaf: adjoints.get(leaf.idx, np.zeros_like(leaf.value))
            for leaf in wrt}
