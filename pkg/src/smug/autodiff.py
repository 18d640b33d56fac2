"""Tape-based reverse-mode differentiation over real float64 tensors.

Every primitive accepts plain arrays or :class:`Variable` objects. When no
input is a Variable the primitive simply computes its value and nothing is
recorded, so model code runs unchanged for inference and for differentiation.

Complex quantities use the ``(..., 2, H, W)`` two-plane layout of
:mod:`smug.fourier`; linear Fourier primitives back-propagate through their
adjoints.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import RecordingError, UsageError
from .fourier import ForwardOperator, from_complex, to_complex
from .linalg import CGResult, dc_solve


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable | None  # upstream grad -> tuple of grads aligned with inputs
    shape: tuple[int, ...]


class Tape:
    """Append-only record of primitive applications.

    Node ids equal insertion order, so inputs always precede the nodes that
    consume them and backward simply walks the list in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value) -> "Variable":
        value = np.array(value, dtype=np.float64)
        return self._push("leaf", value, (), None)

    def _push(self, op, value, inputs, vjp) -> "Variable":
        self.nodes.append(Node(op, inputs, vjp, value.shape))
        return Variable(self, len(self.nodes) - 1, value)


class Variable:
    __slots__ = ("tape", "id", "value")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, tape: Tape, id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Variable(id={self.id}, shape={self.shape})"

    def __float__(self):
        return float(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Variable) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Variable):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise RecordingError("inputs are recorded on different tapes")
    return tape


def _record(op, value, args, vjp):
    """Record ``value`` on the tape shared by ``args``; return a plain array if there is none.

    ``vjp(g)`` must return one gradient per element of ``args``; entries for
    non-Variable arguments are ignored.
    """
    tape = _tape_of(*args)
    if tape is None:
        return value
    idx = tuple(i for i, a in enumerate(args) if isinstance(a, Variable))
    ids = tuple(args[i].id for i in idx)

    def node_vjp(g):
        gs = vjp(g)
        return tuple(gs[i] for i in idx)

    return tape._push(op, value, ids, node_vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise RecordingError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast("add", va, vb)
    return _record("add", va + vb, (a, b),
                   lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast("sub", va, vb)
    return _record("sub", va - vb, (a, b),
                   lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def scale(a, c: float):
    return _record("scale", value_of(a) * c, (a,), lambda g: (g * c,))


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast("mul", va, vb)
    return _record("mul", va * vb, (a, b),
                   lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


mul_elementwise = mul


def div(a, b):
    va, vb = value_of(a), value_of(b)
    _check_broadcast("div", va, vb)
    out = va / vb
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)))


# when set, relu feeds its activation pattern into this hash (see grad_check)
_PATTERN_LOG = None


def relu(x):
    v = value_of(x)
    pos = v > 0  # subgradient 0 at exactly 0
    if _PATTERN_LOG is not None:
        _PATTERN_LOG.update(np.packbits(pos).tobytes())
    return _record("relu", np.where(pos, v, 0.0), (x,), lambda g: (g * pos,))


def tanh(x):
    out = np.tanh(value_of(x))
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    v = value_of(x)
    out = np.exp(-np.logaddexp(0.0, -v))
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def soft_threshold(u, theta):
    """``sign(u) * max(|u| - theta, 0)`` built from two relus."""
    return sub(relu(sub(u, theta)), relu(sub(scale(u, -1.0), theta)))


# -- reductions and reshaping -----------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    v = value_of(x)
    out = np.sum(v, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    v = value_of(x)
    n = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sum_squares(x):
    v = value_of(x)
    return _record("sum_squares", np.asarray(np.sum(v * v)), (x,), lambda g: (2.0 * g * v,))


def reshape(x, shape):
    v = value_of(x)
    return _record("reshape", v.reshape(shape), (x,), lambda g: (g.reshape(v.shape),))


def getitem(x, idx):
    v = value_of(x)

    def vjp(g):
        out = np.zeros_like(v)
        np.add.at(out, idx, g)
        return (out,)

    return _record("getitem", np.array(v[idx]), (x,), vjp)


def stack(xs: Sequence, axis=0):
    vals = [value_of(x) for x in xs]
    out = np.stack(vals, axis=axis)
    return _record("stack", out, tuple(xs),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(vals))))


def concat_channels(xs: Sequence):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=-3)
    bounds = np.cumsum([0] + [v.shape[-3] for v in vals])

    def vjp(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(vals)))

    return _record("concat_channels", out, tuple(xs), vjp)


def matmul(x, w):
    vx, vw = value_of(x), value_of(w)
    if vx.shape[-1] != vw.shape[0] or vw.ndim != 2:
        raise RecordingError(f"matmul: incompatible shapes {vx.shape} and {vw.shape}")
    return _record("matmul", vx @ vw, (x, w), lambda g: (g @ vw.T, vx.reshape(-1, vx.shape[-1]).T @ g.reshape(-1, vw.shape[1])))


# -- convolution and normalisation ------------------------------------------

def _im2col(xp, k, h, w):
    """``(C*k*k, B*H*W)`` patch matrix; this ordering keeps the inner copy contiguous."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # b, c, h, w, k, k
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * h * w)


def _conv_same(x, w):
    b, _, h, wd = x.shape
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = w.reshape(w.shape[0], -1) @ _im2col(xp, k, h, wd)
    return np.ascontiguousarray(out.reshape(-1, b, h, wd).transpose(1, 0, 2, 3)), xp


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution (cross-correlation) with an odd square kernel.

    ``x`` is ``(B, Cin, H, W)``, ``w`` is ``(Cout, Cin, k, k)`` and ``b`` is ``(Cout,)``.
    """
    vx, vw = value_of(x), value_of(w)
    if vx.ndim != 4 or vw.ndim != 4 or vx.shape[1] != vw.shape[1] or vw.shape[2] != vw.shape[3] or vw.shape[2] % 2 == 0:
        raise RecordingError(f"conv2d: incompatible shapes {vx.shape} and {vw.shape}")
    out, xp = _conv_same(vx, vw)
    if b is not None:
        vb = value_of(b)
        if vb.shape != (vw.shape[0],):
            raise RecordingError(f"conv2d: bias shape {vb.shape} does not match {vw.shape[0]} output channels")
        out = out + vb[None, :, None, None]
    k = vw.shape[-1]
    _, _, h, wd = vx.shape

    def vjp(g):
        gx, _ = _conv_same(g, np.flip(vw, axis=(2, 3)).transpose(1, 0, 2, 3))
        gmat = g.transpose(1, 0, 2, 3).reshape(vw.shape[0], -1)
        gw = (gmat @ _im2col(xp, k, h, wd).T).reshape(vw.shape)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _record("conv2d", out, (x, w, b), vjp)


def channel_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalisation over the spatial axes with a learned affine map."""
    vx, vg, vb = value_of(x), value_of(gamma), value_of(beta)
    if vx.ndim != 4 or vg.shape != (vx.shape[1],) or vb.shape != (vx.shape[1],):
        raise RecordingError(f"channel_norm: incompatible shapes {vx.shape}, {vg.shape}, {vb.shape}")
    mu = vx.mean(axis=(2, 3), keepdims=True)
    s = np.sqrt(vx.var(axis=(2, 3), keepdims=True) + eps)
    xhat = (vx - mu) / s
    gam = vg[None, :, None, None]
    out = gam * xhat + vb[None, :, None, None]

    def vjp(g):
        dxhat = g * gam
        dx = (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True)) / s
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record("channel_norm", out, (x, gamma, beta), vjp)


# -- Fourier primitives -----------------------------------------------------

def dft2(x):
    fwd = lambda v: from_complex(np.fft.fft2(to_complex(v), norm="ortho"))  # noqa: E731
    inv = lambda v: from_complex(np.fft.ifft2(to_complex(v), norm="ortho"))  # noqa: E731
    return _record("dft2", fwd(value_of(x)), (x,), lambda g: (inv(g),))


def idft2(y):
    fwd = lambda v: from_complex(np.fft.fft2(to_complex(v), norm="ortho"))  # noqa: E731
    inv = lambda v: from_complex(np.fft.ifft2(to_complex(v), norm="ortho"))  # noqa: E731
    return _record("idft2", inv(value_of(y)), (y,), lambda g: (fwd(g),))


def mask_apply(x, keep):
    keep = np.asarray(keep, dtype=np.float64)
    return _record("mask_apply", value_of(x) * keep, (x,), lambda g: (g * keep,))


def forward_op(A: ForwardOperator, x):
    return mask_apply(dft2(x), A.mask.keep)


def adjoint_op(A: ForwardOperator, y):
    return idft2(mask_apply(y, A.mask.keep))


def dc_solve_node(A: ForwardOperator, y, z, lam: float, cg_tol=1e-6, cg_max=50,
                  log: list | None = None):
    """``x = (A^H A + lam I)^{-1} (A^H y + lam z)`` with implicit differentiation.

    The backward pass solves the same self-adjoint system once for the
    upstream gradient instead of differentiating through CG iterations.
    CG diagnostics for the forward (and backward) solve are appended to ``log``.
    """
    vy, vz = value_of(y), value_of(z)
    if vy.shape[-3:] != vz.shape[-3:]:
        raise RecordingError(f"dc_solve_node: shapes {vy.shape} and {vz.shape} differ")
    rhs = A.adjoint(vy) + lam * vz
    res: CGResult = dc_solve(A, rhs, lam, tol=cg_tol, max_iter=cg_max)
    if log is not None:
        log.append(res)

    def vjp(g):
        back = dc_solve(A, g, lam, tol=cg_tol, max_iter=cg_max)
        if log is not None:
            log.append(back)
        u = back.x
        return _unbroadcast(A.forward(u), vy.shape), _unbroadcast(lam * u, vz.shape)

    return _record("dc_solve", res.x, (y, z), vjp)


# -- backward ---------------------------------------------------------------

class Gradients:
    """Gradients of a scalar output with respect to every node of a tape."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Variable) -> np.ndarray:
        if var.tape is not self._tape:
            raise UsageError("variable belongs to a different tape")
        g = self._grads[var.id]
        return np.zeros(var.shape) if g is None else g


def backward(output: Variable) -> Gradients:
    """Reverse sweep from a scalar output; untouched leaves get zero gradient."""
    if not isinstance(output, Variable):
        raise UsageError("backward needs a recorded Variable")
    if output.value.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    tape = output.tape
    grads: list = [None] * len(tape.nodes)
    grads[output.id] = np.ones(output.shape)
    for i in range(output.id, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            gj = np.asarray(gj, dtype=np.float64)
            grads[j] = gj if grads[j] is None else grads[j] + gj
    return Gradients(tape, grads)


def value_and_grad(f: Callable, *args):
    """Evaluate scalar ``f(*leaves)`` and return ``(value, [grad per arg])``."""
    tape = Tape()
    leaves = [tape.leaf(a) for a in args]
    out = f(*leaves)
    if not isinstance(out, Variable):
        return float(out), [np.zeros(np.shape(a)) for a in args]
    grads = backward(out)
    return float(out.value), [grads[v] for v in leaves]


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: tuple
    step: float
    n_checked: int
    n_skipped: int = 0


def _eval_with_pattern(f: Callable, x):
    """Evaluate ``f(x)`` and return ``(value, digest of every relu activation pattern)``."""
    global _PATTERN_LOG
    prev, _PATTERN_LOG = _PATTERN_LOG, hashlib.sha256()
    try:
        val = float(value_of(f(x)))
        return val, _PATTERN_LOG.digest()
    finally:
        _PATTERN_LOG = prev


def grad_check(f: Callable, x, step=1e-6, exclude=None, coords=None, skip_kinks=False) -> GradCheckReport:
    """Compare reverse-mode and central-difference gradients of scalar ``f`` at ``x``.

    Relative error per coordinate uses ``max(|analytic|, |numeric|, 1e-8)`` as
    denominator. ``exclude`` is a boolean array (same shape as ``x``) of
    coordinates to skip, e.g. those within 1e-3 of a relu kink. ``coords``
    optionally restricts the check to a list of flat indices. With
    ``skip_kinks`` a coordinate is skipped when the two stencil points produce
    different relu activation patterns, since a central difference that
    straddles a kink does not estimate the local derivative.
    """
    x = np.array(x, dtype=np.float64)
    _, (analytic,) = value_and_grad(f, x)
    flat = range(x.size) if coords is None else coords
    skip = np.zeros(x.shape, bool) if exclude is None else np.asarray(exclude, bool)
    worst, worst_idx, n, skipped = 0.0, (), 0, 0
    for k in flat:
        idx = np.unravel_index(k, x.shape)
        if skip[idx]:
            continue
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        if skip_kinks:
            (fp, pp), (fm, pm) = _eval_with_pattern(f, xp), _eval_with_pattern(f, xm)
            if pp != pm:
                skipped += 1
                continue
        else:
            fp, fm = float(value_of(f(xp))), float(value_of(f(xm)))
        num = (fp - fm) / (2 * step)
        a = analytic[idx]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        n += 1
        if n == 1 or err > worst:
            worst, worst_idx = err, tuple(int(i) for i in idx)
    return GradCheckReport(worst, worst_idx, step, n, skipped)
