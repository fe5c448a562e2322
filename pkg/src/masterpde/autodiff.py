"""Scalar/array automatic differentiation used by the solvers.

Two pieces:

* ``Tape`` / ``Var``: reverse-mode AD over array-valued nodes. Each
  elementary operation appends a record holding the parent indices and a
  vector-Jacobian closure; ``Tape.grad`` runs one backward sweep and returns
  gradients with respect to chosen leaves (network parameters).
* ``Dual2``: second-order dual numbers (value, first, second directional
  derivative) whose components may be floats, numpy arrays, or ``Var``
  handles. Carrying ``Dual2`` inputs through a network evaluated on a tape
  yields input derivatives whose parameter-gradients are recovered by the
  same backward sweep (forward-over-reverse).

Supported primitives: +, -, *, /, pow (constant exponent), exp, log, tanh,
softplus, sigmoid, elu, maximum, where, matmul, sum, mean, sqrt, abs.
``maximum`` assigns the full subgradient to its left argument at ties.
Division by zero raises ``ZeroDivisionError`` instead of producing inf/nan.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape", "Var", "Dual2", "value_of", "forward_eval", "seed",
    "exp", "log", "tanh", "softplus", "sigmoid", "elu", "sqrt",
    "maximum", "where", "matmul", "asum", "amean", "power",
]


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tape:
    """Record of elementary operations; supports one reverse sweep."""

    def __init__(self):
        self._values = []
        self._backs = []      # per node: list of (parent_index, vjp callable)

    def __len__(self):
        return len(self._values)

    def _append(self, value, backs):
        self._values.append(value)
        self._backs.append(backs)
        return Var(self, len(self._values) - 1)

    def leaf(self, value):
        """Create an input node (typically a parameter array)."""
        return self._append(np.asarray(value, dtype=np.float64), [])

    def grad(self, out, leaves, seed_value=1.0):
        """Gradients of scalar `out` w.r.t. each Var in `leaves`."""
        if out.value.size != 1:
            raise ValueError("grad expects a scalar output node")
        adj = [None] * (out.index + 1)
        adj[out.index] = np.broadcast_to(
            np.asarray(seed_value, dtype=np.float64), out.value.shape).copy()
        for i in range(out.index, -1, -1):
            a = adj[i]
            if a is None:
                continue
            for parent, vjp in self._backs[i]:
                g = vjp(a)
                if adj[parent] is None:
                    adj[parent] = g
                else:
                    adj[parent] = adj[parent] + g
        out_grads = []
        for leaf in leaves:
            g = adj[leaf.index] if leaf.index <= out.index else None
            if g is None:
                g = np.zeros_like(self._values[leaf.index])
            out_grads.append(g)
        return out_grads


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None   # numpy must defer to the reflected operators

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape

    # -- binary arithmetic ------------------------------------------------
    def __add__(self, other):
        t = self.tape
        if isinstance(other, Var):
            sa, sb = self.value.shape, other.value.shape
            return t._append(self.value + other.value, [
                (self.index, lambda g: _unbroadcast(g, sa)),
                (other.index, lambda g: _unbroadcast(g, sb)),
            ])
        if isinstance(other, Dual2):
            return NotImplemented
        c = np.asarray(other, dtype=np.float64)
        sa = self.value.shape
        return t._append(self.value + c,
                         [(self.index, lambda g: _unbroadcast(g, sa))])

    __radd__ = __add__

    def __neg__(self):
        return self.tape._append(-self.value, [(self.index, lambda g: -g)])

    def __sub__(self, other):
        if isinstance(other, Dual2):
            return NotImplemented
        return self + (-other if isinstance(other, Var) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        t = self.tape
        if isinstance(other, Var):
            av, bv = self.value, other.value
            sa, sb = av.shape, bv.shape
            return t._append(av * bv, [
                (self.index, lambda g: _unbroadcast(g * bv, sa)),
                (other.index, lambda g: _unbroadcast(g * av, sb)),
            ])
        if isinstance(other, Dual2):
            return NotImplemented
        c = np.asarray(other, dtype=np.float64)
        sa = self.value.shape
        return t._append(self.value * c,
                         [(self.index, lambda g: _unbroadcast(g * c, sa))])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            if np.any(other.value == 0.0):
                raise ZeroDivisionError("tape division by zero")
            av, bv = self.value, other.value
            sa, sb = av.shape, bv.shape
            q = av / bv
            return self.tape._append(q, [
                (self.index, lambda g: _unbroadcast(g / bv, sa)),
                (other.index, lambda g: _unbroadcast(-g * q / bv, sb)),
            ])
        if isinstance(other, Dual2):
            return NotImplemented
        c = np.asarray(other, dtype=np.float64)
        if np.any(c == 0.0):
            raise ZeroDivisionError("tape division by zero")
        return self * (1.0 / c)

    def __rtruediv__(self, other):
        if np.any(self.value == 0.0):
            raise ZeroDivisionError("tape division by zero")
        c = np.asarray(other, dtype=np.float64)
        bv = self.value
        sb = bv.shape
        q = c / bv
        return self.tape._append(q, [
            (self.index, lambda g: _unbroadcast(-g * q / bv, sb)),
        ])

    def __pow__(self, p):
        if isinstance(p, (Var, Dual2)):
            raise TypeError("pow supports constant exponents only; "
                            "use exp(p * log(x)) for variable exponents")
        p = float(p)
        av = self.value
        return self.tape._append(av ** p, [
            (self.index, lambda g: g * p * av ** (p - 1.0)),
        ])

    # -- reductions and shaping ------------------------------------------
    def sum(self, axis=None):
        av = self.value
        sa = av.shape
        if axis is None:
            return self.tape._append(np.asarray(av.sum()), [
                (self.index, lambda g: np.broadcast_to(g, sa)),
            ])
        out = av.sum(axis=axis)
        return self.tape._append(out, [
            (self.index,
             lambda g: np.broadcast_to(np.expand_dims(g, axis), sa)),
        ])

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        sa = self.value.shape
        return self.tape._append(self.value.reshape(*shape), [
            (self.index, lambda g: g.reshape(sa)),
        ])

    def __getitem__(self, idx):
        av = self.value
        sa = av.shape

        def vjp(g):
            out = np.zeros(sa)
            np.add.at(out, idx, g)
            return out

        return self.tape._append(av[idx], [(self.index, vjp)])

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def value_of(x):
    """Primal value of a Var/Dual2/array/scalar."""
    if isinstance(x, Dual2):
        return value_of(x.v)
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _is_var(x):
    return isinstance(x, Var)


# ---------------------------------------------------------------------------
# elementary functions, generic over float / ndarray / Var / Dual2
# ---------------------------------------------------------------------------

def _unary(x, f, fp, fpp=None):
    """Apply scalar function with derivative fp (and fpp for Dual2 chain)."""
    if isinstance(x, Dual2):
        v = x.v
        d1 = x.d1 * fp(v)
        d2 = x.d2 * fp(v) + x.d1 * x.d1 * fpp(v)
        return Dual2(f(v), d1, d2)
    return f(x)


def exp(x):
    if isinstance(x, Dual2):
        e = exp(x.v)
        return Dual2(e, x.d1 * e, x.d2 * e + x.d1 * x.d1 * e)
    if _is_var(x):
        e = np.exp(x.value)
        return x.tape._append(e, [(x.index, lambda g: g * e)])
    return np.exp(x)


def log(x):
    if isinstance(x, Dual2):
        inv = 1.0 / x.v
        return Dual2(log(x.v), x.d1 * inv,
                     x.d2 * inv - x.d1 * x.d1 * inv * inv)
    if _is_var(x):
        av = x.value
        return x.tape._append(np.log(av), [(x.index, lambda g: g / av)])
    return np.log(x)


def sqrt(x):
    return power(x, 0.5)


def power(x, p):
    """x ** p for constant p, generic over the value types."""
    if isinstance(x, Dual2):
        return _unary(x, lambda v: power(v, p),
                      lambda v: p * power(v, p - 1.0),
                      lambda v: p * (p - 1.0) * power(v, p - 2.0))
    if _is_var(x):
        return x ** p
    return np.asarray(x, dtype=np.float64) ** p


def tanh(x):
    if isinstance(x, Dual2):
        t = tanh(x.v)
        fp = 1.0 - t * t
        return Dual2(t, x.d1 * fp, x.d2 * fp - 2.0 * t * fp * x.d1 * x.d1)
    if _is_var(x):
        t = np.tanh(x.value)
        return x.tape._append(t, [(x.index, lambda g: g * (1.0 - t * t))])
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, Dual2):
        s = sigmoid(x.v)
        fp = s * (1.0 - s)
        return Dual2(s, x.d1 * fp,
                     x.d2 * fp + x.d1 * x.d1 * fp * (1.0 - 2.0 * s))
    if _is_var(x):
        av = x.value
        s = _sigmoid_np(av)
        return x.tape._append(s, [(x.index, lambda g: g * s * (1.0 - s))])
    return _sigmoid_np(np.asarray(x, dtype=np.float64))


def _sigmoid_np(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _softplus_np(v):
    return np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0)


def softplus(x):
    if isinstance(x, Dual2):
        s = sigmoid(x.v)
        return Dual2(softplus(x.v), x.d1 * s,
                     x.d2 * s + x.d1 * x.d1 * s * (1.0 - s))
    if _is_var(x):
        av = x.value
        s = _sigmoid_np(av)
        return x.tape._append(_softplus_np(av),
                              [(x.index, lambda g: g * s)])
    return _softplus_np(np.asarray(x, dtype=np.float64))


def elu(x):
    """exp(x)-1 for x<0, x for x>=0 (C1 at the join)."""
    if isinstance(x, Dual2):
        v = value_of(x.v)
        pos = v >= 0.0
        ev = exp(where(pos, 0.0, x.v))
        fp = where(pos, 1.0, ev)
        fpp = where(pos, 0.0, ev)
        return Dual2(where(pos, x.v, ev - 1.0),
                     x.d1 * fp, x.d2 * fp + x.d1 * x.d1 * fpp)
    if _is_var(x):
        av = x.value
        pos = av >= 0.0
        ev = np.exp(np.minimum(av, 0.0))
        fp = np.where(pos, 1.0, ev)
        return x.tape._append(np.where(pos, av, ev - 1.0),
                              [(x.index, lambda g: g * fp)])
    av = np.asarray(x, dtype=np.float64)
    return np.where(av >= 0.0, av, np.exp(np.minimum(av, 0.0)) - 1.0)


def maximum(a, b):
    """Elementwise max; at ties the subgradient goes to the left argument."""
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        a = a if isinstance(a, Dual2) else Dual2(a, 0.0, 0.0)
        b = b if isinstance(b, Dual2) else Dual2(b, 0.0, 0.0)
        left = value_of(a.v) >= value_of(b.v)
        return Dual2(where(left, a.v, b.v), where(left, a.d1, b.d1),
                     where(left, a.d2, b.d2))
    if _is_var(a) or _is_var(b):
        left = value_of(a) >= value_of(b)
        return where(left, a, b)
    return np.maximum(a, b)


def where(cond, a, b):
    """Select by boolean array `cond` (condition is not differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        a = a if isinstance(a, Dual2) else Dual2(a, 0.0, 0.0)
        b = b if isinstance(b, Dual2) else Dual2(b, 0.0, 0.0)
        return Dual2(where(cond, a.v, b.v), where(cond, a.d1, b.d1),
                     where(cond, a.d2, b.d2))
    if _is_var(a) or _is_var(b):
        tape = a.tape if _is_var(a) else b.tape
        av = value_of(a)
        bv = value_of(b)
        out = np.where(cond, av, bv)
        backs = []
        if _is_var(a):
            sa = a.value.shape
            backs.append((a.index,
                          lambda g: _unbroadcast(np.where(cond, g, 0.0), sa)))
        if _is_var(b):
            sb = b.value.shape
            backs.append((b.index,
                          lambda g: _unbroadcast(np.where(cond, 0.0, g), sb)))
        return tape._append(out, backs)
    return np.where(cond, a, b)


def matmul(a, b):
    if isinstance(a, Dual2) or isinstance(b, Dual2):
        a = a if isinstance(a, Dual2) else Dual2(a, None, None)
        b = b if isinstance(b, Dual2) else Dual2(b, None, None)

        def mm(x, y):
            for t in (x, y):
                if t is None:
                    return None
                if isinstance(t, (int, float)) and t == 0.0:
                    return None
            return matmul(x, y)

        def add2(x, y):
            if x is None:
                return y
            if y is None:
                return x
            return x + y

        v = matmul(a.v, b.v)
        d1 = add2(mm(a.d1, b.v), mm(a.v, b.d1))
        d2 = add2(add2(mm(a.d2, b.v), mm(a.v, b.d2)),
                  _scale2(mm(a.d1, b.d1)))
        return Dual2(v, 0.0 if d1 is None else d1, 0.0 if d2 is None else d2)
    if _is_var(a) or _is_var(b):
        tape = a.tape if _is_var(a) else b.tape
        av, bv = value_of(a), value_of(b)
        backs = []
        if _is_var(a):
            backs.append((a.index, lambda g: g @ np.swapaxes(bv, -1, -2)))
        if _is_var(b):
            backs.append((b.index, lambda g: np.swapaxes(av, -1, -2) @ g))
        return tape._append(av @ bv, backs)
    return np.asarray(a) @ np.asarray(b)


def _scale2(x):
    return None if x is None else x * 2.0


def concat(parts, axis=-1):
    """Concatenate along an axis, generic over the value types."""
    if any(isinstance(p, Dual2) for p in parts):
        ps = [Dual2._coerce(p) for p in parts]

        def comp(field):
            out = []
            for p in ps:
                c = getattr(p, field)
                if not isinstance(c, Var):
                    c = np.broadcast_to(np.asarray(c, dtype=np.float64),
                                        value_of(p.v).shape)
                out.append(c)
            return concat(out, axis)

        return Dual2(comp("v"), comp("d1"), comp("d2"))
    if any(_is_var(p) for p in parts):
        tape = next(p.tape for p in parts if _is_var(p))
        values = [value_of(p) for p in parts]
        out = np.concatenate(values, axis=axis)
        backs = []
        start = 0
        ax = axis if axis >= 0 else out.ndim + axis
        for p, v in zip(parts, values):
            n = v.shape[ax]
            if _is_var(p):
                sl = tuple(slice(None) if d != ax else slice(start, start + n)
                           for d in range(out.ndim))
                backs.append((p.index, lambda g, sl=sl: g[sl]))
            start += n
        return tape._append(out, backs)
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts],
                          axis=axis)


def asum(x, axis=None):
    if isinstance(x, Dual2):
        return Dual2(asum(x.v, axis), asum(x.d1, axis), asum(x.d2, axis))
    if _is_var(x):
        return x.sum(axis=axis)
    return np.asarray(x, dtype=np.float64).sum(axis=axis)


def amean(x, axis=None):
    if isinstance(x, Dual2):
        return Dual2(amean(x.v, axis), amean(x.d1, axis), amean(x.d2, axis))
    if _is_var(x):
        return x.mean(axis=axis)
    return np.asarray(x, dtype=np.float64).mean(axis=axis)


# ---------------------------------------------------------------------------
# second-order duals
# ---------------------------------------------------------------------------

class Dual2:
    """Truncated second-order Taylor triple (v, d1, d2).

    Components may be floats, numpy arrays, or tape Vars; arithmetic is
    written in terms of the generic operations above so nesting a Dual2 on
    top of a tape yields parameter gradients of input derivatives.
    """

    __slots__ = ("v", "d1", "d2")
    __array_ufunc__ = None   # numpy must defer to the reflected operators

    def __init__(self, v, d1=0.0, d2=0.0):
        self.v = v
        self.d1 = d1
        self.d2 = d2

    @staticmethod
    def _coerce(x):
        return x if isinstance(x, Dual2) else Dual2(x, 0.0, 0.0)

    def __add__(self, other):
        o = Dual2._coerce(other)
        return Dual2(self.v + o.v, self.d1 + o.d1, self.d2 + o.d2)

    __radd__ = __add__

    def __neg__(self):
        return Dual2(-self.v, -self.d1, -self.d2)

    def __sub__(self, other):
        o = Dual2._coerce(other)
        return Dual2(self.v - o.v, self.d1 - o.d1, self.d2 - o.d2)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = Dual2._coerce(other)
        return Dual2(self.v * o.v,
                     self.v * o.d1 + self.d1 * o.v,
                     self.v * o.d2 + 2.0 * self.d1 * o.d1 + self.d2 * o.v)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Dual2._coerce(other)
        ov = value_of(o.v)
        if np.any(ov == 0.0):
            raise ZeroDivisionError("Dual2 division by zero")
        q = self.v / o.v
        q1 = (self.d1 - q * o.d1) / o.v
        q2 = (self.d2 - 2.0 * q1 * o.d1 - q * o.d2) / o.v
        return Dual2(q, q1, q2)

    def __rtruediv__(self, other):
        return Dual2._coerce(other).__truediv__(self)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        return f"Dual2({self.v!r}, {self.d1!r}, {self.d2!r})"


def seed(x, direction=1.0):
    """Dual2 input seeded with a first-order direction."""
    return Dual2(x, direction, 0.0)


def forward_eval(f, x, order=2, direction=1.0):
    """Evaluate ``f`` at ``x`` returning (value, d1) or (value, d1, d2).

    ``f`` takes and returns Dual2-compatible scalars/arrays. The derivative
    is directional along ``direction`` (second derivative is the pure second
    directional derivative; no cross terms are produced).
    """
    out = f(Dual2(x, direction, 0.0))
    out = Dual2._coerce(out)
    if order == 1:
        return value_of(out.v), value_of(out.d1)
    if order == 2:
        return value_of(out.v), value_of(out.d1), value_of(out.d2)
    raise ValueError("order must be 1 or 2")
