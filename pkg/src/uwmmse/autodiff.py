"""Reverse-mode differentiation over a tape of complex array primitives.

Only the primitives needed by the unfolded network are provided.  Every
primitive works on stacks of matrices (leading batch axes) so one tape can
carry a whole minibatch.

Gradient convention: for a real loss ``L`` and a complex array ``p`` the
gradient is ``dL/dRe(p) + 1j * dL/dIm(p)`` (twice the Wirtinger derivative
with respect to ``conj(p)``).  With this convention a holomorphic primitive
``y = f(x)`` pulls back ``g_x = J^H g_y`` and a first-order change of the
loss is ``dL = Re(sum(conj(g) * dp))``.

The ``ad.*`` operation functions accept plain arrays as well as tape
variables; with no variable among the arguments they evaluate the primitive
directly, so model code written against them serves both inference and
training.
"""

from contextlib import nullcontext as _nullcontext
from dataclasses import dataclass, field
import math

import numpy as np

from . import linalg

__all__ = [
    "Tape",
    "Var",
    "GradientSet",
    "GradCheckReport",
    "UnsupportedPrimitiveError",
    "ContractError",
    "record_forward",
    "backward",
    "check_gradients",
    "PRIMITIVES",
]


class UnsupportedPrimitiveError(ValueError):
    pass


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tape and variables
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    kind: str
    args: tuple  # Var ids (int) or ('const', value)
    attrs: dict
    value: object
    ctx: object = None


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "idx", "value")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var's reflected ops

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    shape = property(lambda self: np.shape(self.value))
    ndim = property(lambda self: np.ndim(self.value))
    dtype = property(lambda self: np.asarray(self.value).dtype)

    def __repr__(self):
        return f"Var(#{self.idx}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def H(self):
        return adjoint(self)

    @property
    def real(self):
        return real(self)


class Tape:
    """Ordered record of primitive applications.

    Leaves (parameters) are kept separately in ``leaves`` and are not part of
    ``nodes``; ``nodes`` holds primitive applications only, in execution
    (hence topological) order.
    """

    def __init__(self):
        self._values = []  # value per id, leaves and nodes alike
        self._node_of = []  # id -> node index or None for leaves
        self.nodes = []
        self.leaves = {}  # name -> id

    def leaf(self, value, name):
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        value = np.asarray(value)
        value = np.array(value, dtype=np.clongdouble if linalg.is_extended(value) else np.complex128)
        idx = len(self._values)
        self._values.append(value)
        self._node_of.append(None)
        self.leaves[name] = idx
        return Var(self, idx, value)

    def _record(self, kind, args, attrs, value, ctx):
        idx = len(self._values)
        packed = tuple(a.idx if isinstance(a, Var) else ("const", a) for a in args)
        self._values.append(value)
        self._node_of.append(len(self.nodes))
        self.nodes.append(_Node(kind, packed, attrs, value, ctx))
        return Var(self, idx, value)

    def __len__(self):
        return len(self.nodes)

    def replay(self, leaf_values=None):
        """Re-run every recorded primitive from the leaf values.

        Long-double leaf values make the whole replay run in extended
        precision.  Returns the list of recomputed node values (same order
        as ``nodes``).
        """
        vals = list(self._values)
        if leaf_values:
            for name, v in leaf_values.items():
                v = np.asarray(v)
                if v.dtype != object:
                    v = np.array(v, dtype=np.clongdouble if linalg.is_extended(v) else np.complex128)
                vals[self.leaves[name]] = v
        out = []
        for idx, node_i in enumerate(self._node_of):
            if node_i is None:
                continue
            node = self.nodes[node_i]
            args = [vals[a] if isinstance(a, int) else a[1] for a in node.args]
            value, _ = PRIMITIVES[node.kind].forward(*args, **node.attrs)
            vals[idx] = value
            out.append(value)
        return out


class GradientSet(dict):
    """Gradient arrays keyed by parameter name."""

    def __add__(self, other):
        keys = set(self) | set(other)
        return GradientSet({k: self.get(k, 0) + other.get(k, 0) for k in keys})

    def __mul__(self, c):
        return GradientSet({k: c * v for k, v in self.items()})

    __rmul__ = __mul__

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.values())


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------


class Primitive:
    name = None

    @staticmethod
    def forward(*args, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(g, out, ctx, args, **attrs):
        raise NotImplementedError


PRIMITIVES = {}


def _register(cls):
    PRIMITIVES[cls.name] = cls
    return cls


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _adj(a):
    return np.conj(np.swapaxes(a, -1, -2))


def apply(kind, *args, **attrs):
    """Evaluate primitive ``kind``; record it when any argument is a ``Var``."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise UnsupportedPrimitiveError(f"unsupported primitive {kind!r}") from None
    tape = None
    vals = []
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("variables from different tapes cannot be combined")
            vals.append(a.value)
        else:
            vals.append(a)
    value, ctx = prim.forward(*vals, **attrs)
    if tape is None:
        return value
    return tape._record(kind, args, attrs, value, ctx)


@_register
class Add(Primitive):
    name = "add"

    @staticmethod
    def forward(a, b):
        return np.add(a, b), None

    @staticmethod
    def backward(g, out, ctx, args):
        return _unbroadcast(g, np.shape(args[0])), _unbroadcast(g, np.shape(args[1]))


@_register
class Sub(Primitive):
    name = "sub"

    @staticmethod
    def forward(a, b):
        return np.subtract(a, b), None

    @staticmethod
    def backward(g, out, ctx, args):
        return _unbroadcast(g, np.shape(args[0])), _unbroadcast(-g, np.shape(args[1]))


@_register
class Neg(Primitive):
    name = "neg"

    @staticmethod
    def forward(a):
        return np.negative(a), None

    @staticmethod
    def backward(g, out, ctx, args):
        return (-g,)


@_register
class Mul(Primitive):
    name = "mul"

    @staticmethod
    def forward(a, b):
        return np.multiply(a, b), None

    @staticmethod
    def backward(g, out, ctx, args):
        a, b = args
        return (_unbroadcast(g * np.conj(b), np.shape(a)), _unbroadcast(g * np.conj(a), np.shape(b)))


@_register
class Scale(Primitive):
    name = "scale"

    @staticmethod
    def forward(a, c):
        return np.multiply(a, c), None

    @staticmethod
    def backward(g, out, ctx, args, c):
        return (g * np.conj(c),)

    # ``c`` is passed as an attribute so it is never differentiated


@_register
class Conj(Primitive):
    name = "conj"

    @staticmethod
    def forward(a):
        return np.conj(a), None

    @staticmethod
    def backward(g, out, ctx, args):
        return (np.conj(g),)


@_register
class Matmul(Primitive):
    name = "gemm"

    @staticmethod
    def forward(a, b):
        return linalg.gemm(a, b), None

    @staticmethod
    def backward(g, out, ctx, args):
        a, b = args
        ga = _unbroadcast(g @ _adj(np.asarray(b)), np.shape(a))
        gb = _unbroadcast(_adj(np.asarray(a)) @ g, np.shape(b))
        return ga, gb


@_register
class Adjoint(Primitive):
    name = "adjoint"

    @staticmethod
    def forward(a):
        return linalg.adjoint(a), None

    @staticmethod
    def backward(g, out, ctx, args):
        return (_adj(g),)


@_register
class Transpose(Primitive):
    name = "transpose"

    @staticmethod
    def forward(a, axes):
        return np.transpose(a, axes), None

    @staticmethod
    def backward(g, out, ctx, args, axes):
        return (np.transpose(g, np.argsort(axes)),)


@_register
class Reshape(Primitive):
    name = "reshape"

    @staticmethod
    def forward(a, shape):
        return np.reshape(a, shape), None

    @staticmethod
    def backward(g, out, ctx, args, shape):
        return (np.reshape(g, np.shape(args[0])),)


@_register
class GetItem(Primitive):
    name = "getitem"

    @staticmethod
    def forward(a, index):
        return np.asarray(a)[index], None

    @staticmethod
    def backward(g, out, ctx, args, index):
        a = np.asarray(args[0])
        z = np.zeros(a.shape, dtype=np.result_type(a.dtype, g.dtype))
        z[index] += g
        return (z,)


@_register
class Sum(Primitive):
    name = "sum"

    @staticmethod
    def forward(a, axis=None):
        return np.sum(a, axis=axis), None

    @staticmethod
    def backward(g, out, ctx, args, axis=None):
        shape = np.shape(args[0])
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


def ordered_sum(a, axis):
    """Sum over one axis in an order fixed by the summand values.

    Real and imaginary parts are sorted before a sequential reduction, so
    the rounded result does not depend on the order of the summands.  Node
    aggregations use it to keep relabelled networks bit-identical.  Object
    and long-double arrays (high-precision oracles) use a plain sum.
    """
    a = np.asarray(a)
    if a.dtype == object or linalg.is_extended(a):
        return np.sum(a, axis=axis)
    a = np.moveaxis(a, axis, -1)

    def part(x):
        x = np.sort(x, axis=-1)
        # explicit left-to-right adds: numpy's own reduction order depends on memory layout
        acc = np.zeros(x.shape[:-1], dtype=x.dtype)
        for k in range(x.shape[-1]):
            acc = acc + x[..., k]
        return acc

    if np.iscomplexobj(a):
        return part(a.real) + 1j * part(a.imag)
    return part(a)


@_register
class NodeSum(Primitive):
    """Order-independent sum over one axis (see :func:`ordered_sum`)."""

    name = "node_sum"

    @staticmethod
    def forward(a, axis):
        return ordered_sum(a, axis), None

    @staticmethod
    def backward(g, out, ctx, args, axis):
        shape = np.shape(args[0])
        g = np.expand_dims(g, axis % len(shape))
        return (np.broadcast_to(g, shape).copy(),)


@_register
class Diagonal(Primitive):
    """Diagonal of the last two axes."""

    name = "diagonal"

    @staticmethod
    def forward(a):
        return np.diagonal(a, axis1=-2, axis2=-1).copy(), None

    @staticmethod
    def backward(g, out, ctx, args):
        a = np.asarray(args[0])
        z = np.zeros(a.shape, dtype=np.result_type(a.dtype, g.dtype))
        n = min(a.shape[-2:])
        idx = np.arange(n)
        z[..., idx, idx] = g
        return (z,)


@_register
class NodeDiag(Primitive):
    """Blocks ``x[..., i, i, :, :]`` of a node-pair tensor ``(..., M, M, r, c)``."""

    name = "node_diag"

    @staticmethod
    def forward(a):
        a = np.asarray(a)
        M = a.shape[-3]
        idx = np.arange(M)
        return a[..., idx, idx, :, :], None

    @staticmethod
    def backward(g, out, ctx, args):
        a = np.asarray(args[0])
        z = np.zeros(a.shape, dtype=np.result_type(a.dtype, g.dtype))
        idx = np.arange(a.shape[-3])
        z[..., idx, idx, :, :] = g
        return (z,)


@_register
class Concat(Primitive):
    name = "concat"

    @staticmethod
    def forward(*arrays, axis=-1):
        return np.concatenate(arrays, axis=axis), None

    @staticmethod
    def backward(g, out, ctx, args, axis=-1):
        sizes = [np.shape(a)[axis] for a in args]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))


@_register
class HermitianSolve(Primitive):
    name = "hermitian_solve"

    @staticmethod
    def forward(A, B):
        L = linalg.cholesky(A)
        X = linalg.cho_solve(L, B)
        return X, L

    @staticmethod
    def backward(g, out, L, args):
        A, B = args
        gB = linalg.cho_solve(L, g)  # A^{-H} g, reusing the forward factor
        gA = -gB @ _adj(out)
        return _unbroadcast(gA, np.shape(A)), _unbroadcast(gB, np.shape(B))


@_register
class Solve(Primitive):
    name = "solve"

    @staticmethod
    def forward(A, B):
        return linalg.solve(A, B), None

    @staticmethod
    def backward(g, out, ctx, args):
        A, B = args
        gB = linalg.solve(_adj(np.asarray(A)), g)
        gA = -gB @ _adj(out)
        return _unbroadcast(gA, np.shape(A)), _unbroadcast(gB, np.shape(B))


@_register
class LogDet(Primitive):
    """Base-2 log-determinant of HPD matrices (real output)."""

    name = "logdet_cap"

    @staticmethod
    def forward(A):
        try:
            L = linalg.cholesky(A)
        except linalg.SingularMatrixError as exc:
            raise linalg.DomainError(f"logdet of a non-HPD matrix: {exc}") from None
        return linalg.logdet_from_cholesky(L), L

    @staticmethod
    def backward(g, out, L, args):
        n = L.shape[-1]
        inv = linalg.cho_solve(L, np.broadcast_to(np.eye(n, dtype=np.complex128), L.shape))
        g = np.asarray(g)[..., None, None]
        return (g * inv / linalg.LN2,)


@_register
class LogDetGram(Primitive):
    """``log2 det(X X^H + sigma^2 I)`` from a QR factor (real output)."""

    name = "logdet_gram"

    @staticmethod
    def forward(X, sigma):
        if not sigma > 0:
            raise linalg.DomainError("logdet_gram needs sigma > 0")
        L = linalg.gram_factor(X, sigma)
        return linalg.logdet_from_cholesky(L), L

    @staticmethod
    def backward(g, out, L, args, sigma):
        X = np.asarray(args[0])
        g = np.asarray(g)[..., None, None]
        return (2.0 * g * linalg.cho_solve(L, X) / linalg.LN2,)


@_register
class FrobNorm(Primitive):
    name = "frob_norm"

    @staticmethod
    def forward(A):
        return linalg.frob_norm(A), None

    @staticmethod
    def backward(g, out, ctx, args):
        A = np.asarray(args[0])
        out = np.asarray(out)
        safe = np.where(out > 0, out, 1.0)
        if A.ndim < 2:
            return (g * A / safe if out > 0 else np.zeros_like(A),)
        scale = np.where(out > 0, np.asarray(g) / safe, 0.0)
        return (scale[..., None, None] * A,)


@_register
class CReLU(Primitive):
    """ReLU applied separately to real and imaginary parts."""

    name = "crelu"

    @staticmethod
    def forward(x):
        x = np.asarray(x)
        if np.iscomplexobj(x) or x.dtype == object:
            return np.maximum(linalg.re(x), 0.0) + 1j * np.maximum(linalg.im(x), 0.0), None
        return np.maximum(x, 0.0), None

    @staticmethod
    def backward(g, out, ctx, args):
        x = np.asarray(args[0])
        # inactive at exactly zero
        gr = np.where(x.real > 0, np.real(g), 0.0)
        if np.iscomplexobj(x):
            return (gr + 1j * np.where(x.imag > 0, np.imag(g), 0.0),)
        return (gr,)


@_register
class Trace(Primitive):
    name = "trace"

    @staticmethod
    def forward(A):
        return np.trace(A, axis1=-2, axis2=-1), None

    @staticmethod
    def backward(g, out, ctx, args):
        A = np.asarray(args[0])
        z = np.zeros(A.shape, dtype=np.result_type(A.dtype, np.asarray(g).dtype))
        idx = np.arange(min(A.shape[-2:]))
        z[..., idx, idx] = np.asarray(g)[..., None]
        return (z,)


@_register
class Real(Primitive):
    name = "real"

    @staticmethod
    def forward(x):
        return np.array(linalg.re(x)), None

    @staticmethod
    def backward(g, out, ctx, args):
        return (np.real(g).astype(np.result_type(np.asarray(args[0]).dtype, np.float64)),)


@_register
class Reciprocal(Primitive):
    name = "reciprocal"

    @staticmethod
    def forward(x):
        return 1.0 / np.asarray(x), None

    @staticmethod
    def backward(g, out, ctx, args):
        return (-g * np.conj(out) ** 2,)


@_register
class RowNormalize(Primitive):
    """``S[i, k] / (eps + sum_k |S[i, k]|)`` on the last two axes."""

    name = "row_normalize"

    @staticmethod
    def forward(S, eps=1e-12):
        S = np.asarray(S)
        denom = eps + np.expand_dims(ordered_sum(np.abs(S), -1), -1)
        return S / denom, denom

    @staticmethod
    def backward(g, out, denom, args, eps=1e-12):
        S = np.asarray(args[0])
        mag = np.abs(S)
        phase = np.divide(S, mag, out=np.zeros_like(S), where=mag > 0)
        r = np.real(np.sum(np.conj(g) * S, axis=-1, keepdims=True))
        return (g / denom - (r / denom ** 2) * phase,)


@_register
class Saturate(Primitive):
    """Per-node power saturation on ``(..., T, d)`` beamformers.

    Nodes with ``||V||_F^2 <= pmax * (1 + 1e-12)`` pass unchanged, others are
    rescaled onto the power sphere.  The slack makes the map exactly
    idempotent under round-off.
    """

    name = "saturate"

    @staticmethod
    def forward(V, pmax):
        V = np.asarray(V)
        power = np.sum(linalg.abs2(V), axis=(-2, -1))
        sat = np.asarray(power > pmax * (1.0 + 1e-12), dtype=bool)
        norm = linalg.esqrt(power)
        scale = np.where(sat, math.sqrt(pmax) / np.where(sat, norm, 1.0), 1.0)
        return V * scale[..., None, None], (sat, norm, scale)

    @staticmethod
    def backward(g, out, ctx, args, pmax):
        sat, norm, scale = ctx
        V = np.asarray(args[0])
        r = np.real(np.sum(np.conj(g) * V, axis=(-2, -1)))
        safe = np.where(sat, norm, 1.0)
        corr = np.where(sat, scale * r / safe ** 2, 0.0)
        return (scale[..., None, None] * g - corr[..., None, None] * V,)


# ---------------------------------------------------------------------------
# Operation functions (array or Var in, array or Var out)
# ---------------------------------------------------------------------------


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def neg(a):
    return apply("neg", a)


def mul(a, b):
    return apply("mul", a, b)


def scale(a, c):
    return apply("scale", a, c=c)


def conj(a):
    return apply("conj", a)


def matmul(a, b):
    return apply("gemm", a, b)


gemm = matmul


def adjoint(a):
    return apply("adjoint", a)


def transpose(a, axes):
    return apply("transpose", a, axes=tuple(axes))


def reshape(a, shape):
    return apply("reshape", a, shape=tuple(shape))


def getitem(a, index):
    return apply("getitem", a, index=index)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    return apply("sum", a, axis=axis)


def node_sum(a, axis):
    return apply("node_sum", a, axis=axis)


def diagonal(a):
    return apply("diagonal", a)


def node_diag(a):
    return apply("node_diag", a)


def concat(arrays, axis=-1):
    return apply("concat", *arrays, axis=axis)


def hermitian_solve(A, B):
    return apply("hermitian_solve", A, B)


def solve(A, B):
    return apply("solve", A, B)


def logdet_cap(A):
    return apply("logdet_cap", A)


def logdet_gram(X, sigma):
    return apply("logdet_gram", X, sigma=float(sigma))


def frob_norm(A):
    return apply("frob_norm", A)


def crelu(x):
    return apply("crelu", x)


def trace(A):
    return apply("trace", A)


def real(x):
    return apply("real", x)


def reciprocal(x):
    return apply("reciprocal", x)


def row_normalize(S, eps=1e-12):
    return apply("row_normalize", S, eps=eps)


def saturate(V, pmax):
    return apply("saturate", V, pmax=float(pmax))


def value(x):
    """Underlying array of a ``Var`` (identity on arrays)."""
    return x.value if isinstance(x, Var) else x


# ---------------------------------------------------------------------------
# Recording, backward, gradient checking
# ---------------------------------------------------------------------------


def _param_items(params):
    if hasattr(params, "as_dict"):
        return params.as_dict()
    return dict(params)


def _rebuild(params, arrays):
    if hasattr(params, "replace_arrays"):
        return params.replace_arrays(arrays)
    return dict(arrays)


def record_forward(program, inputs, params):
    """Run ``program(inputs, params)`` on a fresh tape.

    ``params`` is a mapping of name to complex array, or an object exposing
    ``as_dict()`` and ``replace_arrays(mapping)`` (e.g. ``ModelParams``).
    Returns ``(tape, outputs)``.
    """
    tape = Tape()
    leaves = {name: tape.leaf(v, name) for name, v in _param_items(params).items()}
    outputs = program(inputs, _rebuild(params, leaves))
    tape.outputs = outputs
    return tape, outputs


def backward(tape, output=None, seed=1.0):
    """Gradients of a real scalar output with respect to every tape leaf."""
    if output is None:
        output = getattr(tape, "outputs", None)
    grads = GradientSet(
        {name: np.zeros_like(tape._values[i]) for name, i in tape.leaves.items()}
    )
    if not isinstance(output, Var):
        val = np.asarray(output)
        if np.iscomplexobj(val) or val.size != 1:
            raise ContractError("loss must be a real scalar")
        return grads
    if output.tape is not tape:
        raise ContractError("output does not belong to this tape")
    if np.iscomplexobj(output.value) or np.size(output.value) != 1:
        raise ContractError(f"loss must be a real scalar, got {output.dtype} of shape {output.shape}")

    acc = [None] * len(tape._values)
    acc[output.idx] = np.full(np.shape(output.value), float(seed))
    for idx in range(output.idx, -1, -1):
        node_i = tape._node_of[idx]
        g = acc[idx]
        if node_i is None or g is None:
            continue
        node = tape.nodes[node_i]
        args = [tape._values[a] if isinstance(a, int) else a[1] for a in node.args]
        in_grads = PRIMITIVES[node.kind].backward(g, node.value, node.ctx, args, **node.attrs)
        for a, ga in zip(node.args, in_grads):
            if not isinstance(a, int) or ga is None:
                continue
            if not np.iscomplexobj(tape._values[a]):
                ga = np.real(ga)
            acc[a] = ga if acc[a] is None else acc[a] + ga
        acc[idx] = None  # free intermediate
    for name, i in tape.leaves.items():
        if acc[i] is not None:
            grads[name] = np.asarray(acc[i], dtype=np.complex128).reshape(np.shape(tape._values[i]))
    return grads


@dataclass
class GradCheckReport:
    coords: list = field(default_factory=list)  # (name, flat index, 're' | 'im')
    analytic: np.ndarray = None
    numeric: np.ndarray = None
    rel_errors: np.ndarray = None

    @property
    def max_rel_error(self):
        return float(np.max(self.rel_errors)) if len(self.coords) else 0.0

    @property
    def mean_rel_error(self):
        return float(np.mean(self.rel_errors)) if len(self.coords) else 0.0

    def fraction_below(self, tol):
        if not len(self.coords):
            return 1.0
        return float(np.mean(self.rel_errors <= tol))

    def __len__(self):
        return len(self.coords)


def check_gradients(
    program, inputs, params, h=1e-6, n_coords=None, rng=None, floor=1e-10, precision="double", mp_digits=40
):
    """Compare ``backward`` against central differences coordinate by coordinate.

    Each complex parameter entry contributes two real coordinates.  When
    ``n_coords`` is given, that many coordinates are drawn without
    replacement using ``rng``.  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.

    ``precision="extended"`` (long double) and ``precision="mp"`` (mpmath
    with ``mp_digits`` significant digits) evaluate the shifted losses by
    replaying the recorded tape at higher precision.  Use them for
    ill-conditioned losses, where float64 round-off in the loss divided by
    ``h`` would swamp the difference quotient.  The replay follows the
    recorded branch structure, so it is only valid for programs without
    value-dependent Python control flow near the evaluation point.
    """
    if not (1e-8 <= h <= 1e-4):
        raise ValueError("h must lie in [1e-8, 1e-4]")
    if precision not in ("double", "extended", "mp"):
        raise ValueError("precision must be 'double', 'extended' or 'mp'")
    arrays = {k: np.array(v, dtype=np.complex128) for k, v in _param_items(params).items()}
    coords = [
        (name, i, part) for name, a in arrays.items() for i in range(a.size) for part in ("re", "im")
    ]
    report = GradCheckReport()
    if not coords:
        report.analytic = report.numeric = report.rel_errors = np.zeros(0)
        return report
    if n_coords is not None and n_coords < len(coords):
        rng = np.random.default_rng(rng)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    tape, out = record_forward(program, inputs, params)
    grads = backward(tape, out)

    if precision == "mp":
        import mpmath

        ctx = mpmath.workprec(int(mp_digits * 3.33) + 1)
        to_mp = np.vectorize(lambda z: mpmath.mpc(z.real, z.imag), otypes=[object])
    else:
        ctx = _nullcontext()

    def evaluate(name, i, delta):
        if precision != "double":
            if precision == "mp":
                trial = {k: to_mp(v) for k, v in arrays.items()}
                delta = mpmath.mpc(delta.real, delta.imag) if isinstance(delta, complex) else mpmath.mpf(delta)
            else:
                trial = {k: v.astype(np.clongdouble) for k, v in arrays.items()}
            trial[name].reshape(-1)[i] += delta
            replayed = tape.replay(trial)
            node_i = tape._node_of[out.idx] if isinstance(out, Var) else None
            if node_i is None:
                return float(np.real(value(out)))
            # keep the extra precision through the difference quotient
            return linalg.re(replayed[node_i])[()]
        trial = {k: v.copy() for k, v in arrays.items()}
        trial[name].reshape(-1)[i] += delta
        return float(np.real(value(program(inputs, _rebuild(params, trial)))))

    ana, num = [], []
    for name, i, part in coords:
        step = h if part == "re" else 1j * h
        with ctx:
            fd = float((evaluate(name, i, step) - evaluate(name, i, -step)) / (2 * h))
        g = grads[name].reshape(-1)[i]
        ana.append(g.real if part == "re" else g.imag)
        num.append(fd)
    ana = np.array(ana)
    num = np.array(num)
    denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    report.coords = coords
    report.analytic = ana
    report.numeric = num
    report.rel_errors = np.abs(ana - num) / denom
    return report
