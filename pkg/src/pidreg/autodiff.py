"""Reverse-mode automatic differentiation on 2-d float64 arrays.

Deliberately small: a tape, a tensor handle, and the primitive set the
losses in this package are built from.  Everything is dense numpy, every
value is a 2-d float64 array (scalars are shape (1, 1)), and the tape is
rebuilt from scratch for every forward pass, so there is no state to
zero between steps.

Broadcasting in the elementwise ops is restricted to the shapes that
actually occur here: equal shapes, a (1, 1) scalar against anything,
a (1, d) row against (n, d), and an (n, 1) column against (n, d).
"""

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "grad_check",
]


def _as_value(x):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    if v.ndim != 2:
        raise ValueError(f"tensors are 2-d, got shape {v.shape}")
    return v


def _unbroadcast(grad, shape):
    """Sum an upstream gradient back down to a broadcast operand's shape."""
    if grad.shape == shape:
        return grad
    g = grad
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    if g.shape != shape:
        raise ValueError(f"cannot reduce grad {grad.shape} to {shape}")
    return g


def _check_broadcast(sa, sb):
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"incompatible shapes {sa} and {sb}")


class Tensor:
    """Handle for one node on a tape.  Do not construct directly."""

    __slots__ = ("value", "tape", "idx", "parents", "bwd", "needs_grad", "op")

    def __init__(self, value, tape, idx, parents, bwd, needs_grad, op):
        self.value = value
        self.tape = tape
        self.idx = idx
        self.parents = parents
        self.bwd = bwd
        self.needs_grad = needs_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.value.shape}, idx={self.idx})"

    # arithmetic sugar; floats and arrays promote to constants

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.scale(self, -1.0)


class Grads:
    """Gradient map returned by Tape.backward."""

    def __init__(self, table):
        self._table = table

    def wrt(self, tensor):
        g = self._table.get(tensor.idx)
        if g is None:
            return np.zeros_like(tensor.value)
        return g


class Tape:
    def __init__(self, check_finite=True):
        self.nodes = []
        self.check_finite = check_finite

    # ---- node construction ----

    def _record(self, value, parents, bwd, op, needs_grad=None):
        if self.check_finite and not np.all(np.isfinite(value)):
            raise ArithmeticError(f"non-finite value produced by op '{op}'")
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        t = Tensor(value, self, len(self.nodes), tuple(parents), bwd, needs_grad, op)
        self.nodes.append(t)
        return t

    def leaf(self, value):
        """Differentiable input."""
        return self._record(_as_value(value).copy(), (), None, "leaf", needs_grad=True)

    def constant(self, value):
        """Non-differentiable input."""
        return self._record(_as_value(value).copy(), (), None, "const", needs_grad=False)

    def _lift(self, x):
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return x
        return self.constant(x)

    # ---- elementwise ----

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        _check_broadcast(a.shape, b.shape)
        v = a.value + b.value

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._record(v, (a, b), bwd, "add")

    def sub(self, a, b):
        a, b = self._lift(a), self._lift(b)
        _check_broadcast(a.shape, b.shape)
        v = a.value - b.value

        def bwd(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._record(v, (a, b), bwd, "sub")

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        _check_broadcast(a.shape, b.shape)
        v = a.value * b.value

        def bwd(g):
            return (_unbroadcast(g * b.value, a.shape),
                    _unbroadcast(g * a.value, b.shape))

        return self._record(v, (a, b), bwd, "mul")

    def div(self, a, b):
        a, b = self._lift(a), self._lift(b)
        _check_broadcast(a.shape, b.shape)
        if np.any(b.value == 0.0):
            raise ZeroDivisionError("division by zero on tape")
        v = a.value / b.value

        def bwd(g):
            return (_unbroadcast(g / b.value, a.shape),
                    _unbroadcast(-g * a.value / (b.value * b.value), b.shape))

        return self._record(v, (a, b), bwd, "div")

    def scale(self, a, s):
        a = self._lift(a)
        s = float(s)
        return self._record(a.value * s, (a,), lambda g: (g * s,), "scale")

    def exp(self, a):
        a = self._lift(a)
        with np.errstate(over="ignore"):
            v = np.exp(a.value)
        return self._record(v, (a,), lambda g: (g * v,), "exp")

    def log(self, a):
        a = self._lift(a)
        if np.any(a.value <= 0.0):
            raise ValueError("log of non-positive operand on tape")
        v = np.log(a.value)
        return self._record(v, (a,), lambda g: (g / a.value,), "log")

    def tanh(self, a):
        a = self._lift(a)
        v = np.tanh(a.value)
        return self._record(v, (a,), lambda g: (g * (1.0 - v * v),), "tanh")

    def sigmoid(self, a):
        a = self._lift(a)
        # stable two-branch logistic
        x = a.value
        v = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return self._record(v, (a,), lambda g: (g * v * (1.0 - v),), "sigmoid")

    def leaky_relu(self, a, slope=0.01):
        a = self._lift(a)
        slope = float(slope)
        mask = a.value > 0.0
        v = np.where(mask, a.value, slope * a.value)
        return self._record(v, (a,), lambda g: (np.where(mask, g, slope * g),), "leaky_relu")

    def powc(self, a, p):
        """Elementwise power with a constant exponent; base must be positive."""
        a = self._lift(a)
        p = float(p)
        if np.any(a.value <= 0.0):
            raise ValueError("powc requires a positive base")
        v = a.value ** p
        return self._record(v, (a,), lambda g: (g * p * a.value ** (p - 1.0),), "powc")

    # ---- linear algebra ----

    def matmul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        v = a.value @ b.value

        def bwd(g):
            return g @ b.value.T, a.value.T @ g

        return self._record(v, (a, b), bwd, "matmul")

    def transpose(self, a):
        a = self._lift(a)
        return self._record(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")

    def inv_sqrtm_psd(self, a, min_eig=0.0):
        """Symmetric inverse square root of an SPD matrix.

        The input is symmetrised first, so the gradient check can perturb
        single entries.  Eigenvalues must exceed min_eig; callers add their
        own ridge beforehand.
        """
        a = self._lift(a)
        if a.shape[0] != a.shape[1]:
            raise ValueError("inv_sqrtm_psd needs a square matrix")
        s = 0.5 * (a.value + a.value.T)
        w, u = np.linalg.eigh(s)
        if w.min() <= min_eig:
            raise np.linalg.LinAlgError(
                f"matrix not positive definite (min eigenvalue {w.min():.3e})")
        b = (u * (w ** -0.5)) @ u.T
        b = 0.5 * (b + b.T)

        def bwd(g):
            # d(A^-1/2) solved in the eigenbasis: no eigenvalue-gap terms
            rw = w ** -0.5
            phi = 1.0 / (np.outer(w, w) * (rw[:, None] + rw[None, :]))
            gt = u.T @ g @ u
            d = u @ (-gt * phi) @ u.T
            return (0.5 * (d + d.T),)

        return self._record(b, (a,), bwd, "inv_sqrtm_psd")

    # ---- shape ----

    def reshape(self, a, shape):
        a = self._lift(a)
        shape = tuple(int(s) for s in shape)
        if len(shape) != 2:
            raise ValueError("reshape target must be 2-d")
        v = a.value.reshape(shape)

        def bwd(g):
            return (g.reshape(a.shape),)

        return self._record(v.copy(), (a,), bwd, "reshape")

    def broadcast_row(self, a, n):
        """Tile a (1, d) row vector to (n, d)."""
        a = self._lift(a)
        if a.shape[0] != 1:
            raise ValueError("broadcast_row expects a (1, d) operand")
        v = np.broadcast_to(a.value, (int(n), a.shape[1])).copy()

        def bwd(g):
            return (g.sum(axis=0, keepdims=True),)

        return self._record(v, (a,), bwd, "broadcast_row")

    def concat_cols(self, parts):
        parts = [self._lift(p) for p in parts]
        n = parts[0].shape[0]
        for p in parts:
            if p.shape[0] != n:
                raise ValueError("concat_cols needs equal row counts")
        v = np.hstack([p.value for p in parts])
        widths = [p.shape[1] for p in parts]
        edges = np.cumsum([0] + widths)

        def bwd(g):
            return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

        return self._record(v, tuple(parts), bwd, "concat_cols")

    # ---- reductions ----

    def sum(self, a, axis=None):
        a = self._lift(a)
        if axis is None:
            v = np.array([[a.value.sum()]])

            def bwd(g):
                return (np.full(a.shape, g[0, 0]),)
        elif axis == 0:
            v = a.value.sum(axis=0, keepdims=True)

            def bwd(g):
                return (np.broadcast_to(g, a.shape).copy(),)
        elif axis == 1:
            v = a.value.sum(axis=1, keepdims=True)

            def bwd(g):
                return (np.broadcast_to(g, a.shape).copy(),)
        else:
            raise ValueError("axis must be None, 0 or 1")
        return self._record(v, (a,), bwd, "sum")

    def mean(self, a, axis=None):
        a = self._lift(a)
        if axis is None:
            denom = a.value.size
        elif axis == 0:
            denom = a.shape[0]
        elif axis == 1:
            denom = a.shape[1]
        else:
            raise ValueError("axis must be None, 0 or 1")
        return self.scale(self.sum(a, axis=axis), 1.0 / denom)

    # ---- distances and ordering ----

    def pairwise_sqdist(self, a, b):
        """Matrix of squared Euclidean distances between rows of a and rows of b."""
        a, b = self._lift(a), self._lift(b)
        if a.shape[1] != b.shape[1]:
            raise ValueError("row dimensionality mismatch")
        av = a.value
        bv = b.value
        d = (av * av).sum(axis=1)[:, None] + (bv * bv).sum(axis=1)[None, :] - 2.0 * av @ bv.T
        np.maximum(d, 0.0, out=d)

        def bwd(g):
            ga = 2.0 * (g.sum(axis=1)[:, None] * av - g @ bv)
            gb = 2.0 * (g.sum(axis=0)[:, None] * bv - g.T @ av)
            return ga, gb

        return self._record(d, (a, b), bwd, "pairwise_sqdist")

    def sort_gather(self, a):
        """Ascending sort of an (m, 1) column; backward scatters through the permutation."""
        a = self._lift(a)
        if a.shape[1] != 1:
            raise ValueError("sort_gather expects an (m, 1) column")
        perm = np.argsort(a.value[:, 0], kind="stable")
        v = a.value[perm]

        def bwd(g):
            out = np.zeros_like(a.value)
            out[perm] = g
            return (out,)

        return self._record(v, (a,), bwd, "sort_gather")

    # ---- backward ----

    def backward(self, root):
        """Gradients of a (1, 1) scalar node with respect to every node that needs them."""
        if root.tape is not self:
            raise ValueError("root lives on a different tape")
        if root.shape != (1, 1):
            raise ValueError("backward root must be a scalar node")
        table = {root.idx: np.ones((1, 1))}
        for i in range(root.idx, -1, -1):
            node = self.nodes[i]
            g = table.get(i)
            if g is None or not node.parents:
                continue
            parent_grads = node.bwd(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.needs_grad:
                    continue
                acc = table.get(p.idx)
                if acc is None:
                    table[p.idx] = pg.copy()
                else:
                    acc += pg
        return Grads(table)


def grad_check(build, x0, step=1e-5):
    """Max relative error between backward and central differences.

    build maps a leaf Tensor to a scalar Tensor on the same tape.  The
    builder is run twice to confirm the forward pass is deterministic,
    then every entry of x0 is perturbed both ways.
    """
    x0 = _as_value(x0)

    def run(x):
        tape = Tape()
        t = tape.leaf(x)
        out = build(t)
        return tape, t, out

    tape, t, out = run(x0)
    _, _, out2 = run(x0)
    if not np.array_equal(out.value, out2.value):
        raise AssertionError("forward pass is not deterministic")
    analytic = tape.backward(out).wrt(t)

    worst = 0.0
    for i in range(x0.shape[0]):
        for j in range(x0.shape[1]):
            xp = x0.copy()
            xp[i, j] += step
            xm = x0.copy()
            xm[i, j] -= step
            fp = run(xp)[2].value[0, 0]
            fm = run(xm)[2].value[0, 0]
            numeric = (fp - fm) / (2.0 * step)
            rel = abs(analytic[i, j] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return worst
