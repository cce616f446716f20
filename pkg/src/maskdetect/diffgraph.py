"""A small reverse-mode gradient engine over a closed set of array operations.

A :class:`Tape` is a recorded program (a Wengert list).  Building it is
symbolic; :meth:`Tape.forward` binds leaf values and evaluates every op in
order, caching what each backward rule needs, and :meth:`Tape.backward`
walks the list in reverse, accumulating gradients additively at fan-out.
The same tape can be re-run with new leaf values, which is how the attack
loops and the finite-difference checker use it.

Arrays may carry arbitrary leading batch axes; ``add``/``sub``/``mul``
broadcast numpy-style and reduce gradients back to the operand shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dsp


class GraphError(RuntimeError):
    pass


class NonFiniteError(GraphError):
    def __init__(self, index, kind):
        super().__init__(f"non-finite value produced by op #{index} ({kind})")
        self.index = index
        self.kind = kind


@dataclass(frozen=True)
class OpKind:
    name: str
    forward: Callable
    backward: Callable
    linear: bool = False


OPS: dict[str, OpKind] = {}


def _register(name, linear=False):
    def deco(fn_pair):
        fwd, bwd = fn_pair()
        OPS[name] = OpKind(name, fwd, bwd, linear)
        return fn_pair
    return deco


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- op definitions: forward(p, *xs) -> (y, cache); backward(p, cache, g) -> grads ---

@_register("add", linear=True)
def _add():
    def f(p, a, b):
        return a + b, (np.shape(a), np.shape(b))
    def b(p, c, g):
        return unbroadcast(g, c[0]), unbroadcast(g, c[1])
    return f, b


@_register("sub", linear=True)
def _sub():
    def f(p, a, b):
        return a - b, (np.shape(a), np.shape(b))
    def b(p, c, g):
        return unbroadcast(g, c[0]), -unbroadcast(g, c[1])
    return f, b


@_register("mul")
def _mul():
    def f(p, a, b):
        return a * b, (a, b)
    def b(p, c, g):
        a, bb = c
        return unbroadcast(g * bb, np.shape(a)), unbroadcast(g * a, np.shape(bb))
    return f, b


@_register("scale", linear=True)
def _scale():
    def f(p, a):
        return a * p["c"], None
    def b(p, c, g):
        return (g * p["c"],)
    return f, b


@_register("square")
def _square():
    def f(p, a):
        return a * a, a
    def b(p, a, g):
        return (2.0 * a * g,)
    return f, b


@_register("pow")
def _pow():
    # x ** e for x > 0
    def f(p, a):
        y = a ** p["e"]
        return y, (a, y)
    def b(p, c, g):
        a, y = c
        return (g * p["e"] * y / a,)
    return f, b


@_register("log")
def _log():
    def f(p, a):
        z = a + p["eps"]
        return np.log(z), z
    def b(p, z, g):
        return (g / z,)
    return f, b


@_register("tanh")
def _tanh():
    def f(p, a):
        y = np.tanh(a)
        return y, y
    def b(p, y, g):
        return (g * (1.0 - y * y),)
    return f, b


@_register("sigmoid")
def _sigmoid():
    def f(p, a):
        y = 0.5 * (1.0 + np.tanh(0.5 * a))
        return y, y
    def b(p, y, g):
        return (g * y * (1.0 - y),)
    return f, b


@_register("relu")
def _relu():
    def f(p, a):
        on = a > 0
        return np.where(on, a, 0.0), on
    def b(p, on, g):
        return (np.where(on, g, 0.0),)
    return f, b


@_register("abs")
def _abs():
    def f(p, a):
        return np.abs(a), np.sign(a)
    def b(p, s, g):
        return (g * s,)
    return f, b


@_register("sum", linear=True)
def _sum():
    def f(p, a):
        return np.sum(a, axis=p.get("axis"), keepdims=p.get("keepdims", False)), np.shape(a)
    def b(p, shape, g):
        axis = p.get("axis")
        if axis is not None and not p.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return f, b


@_register("mean", linear=True)
def _mean():
    def f(p, a):
        axis = p.get("axis")
        n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
        return np.mean(a, axis=axis, keepdims=p.get("keepdims", False)), (np.shape(a), n)
    def b(p, c, g):
        shape, n = c
        axis = p.get("axis")
        if axis is not None and not p.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)
    return f, b


@_register("matmul")
def _matmul():
    def left(a, b):
        # a (I, J) against a batched b (..., J, K), as one large GEMM
        y = np.tensordot(a, b, axes=([1], [b.ndim - 2]))  # (I, ..., K)
        return np.moveaxis(y, 0, -2)
    def f(p, a, b):
        if a.ndim == 2 and b.ndim > 2:
            return left(a, b), (a, b)
        return np.matmul(a, b), (a, b)
    def b(p, c, g):
        a, bb = c
        if a.ndim == 2 and bb.ndim > 2:
            lead = tuple(range(bb.ndim - 2))
            ga = np.tensordot(g, bb, axes=(lead + (bb.ndim - 1,), lead + (bb.ndim - 1,)))
            return ga, left(a.T, g)
        ga = np.matmul(g, np.swapaxes(bb, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, bb.shape)
    return f, b


@_register("transpose", linear=True)
def _transpose():
    def f(p, a):
        return np.transpose(a, p["axes"]), None
    def b(p, c, g):
        return (np.transpose(g, np.argsort(p["axes"])),)
    return f, b


@_register("reshape", linear=True)
def _reshape():
    def f(p, a):
        return np.reshape(a, p["shape"]), a.shape
    def b(p, shape, g):
        return (np.reshape(g, shape),)
    return f, b


@_register("stft", linear=True)
def _stft():
    def f(p, x):
        return dsp.stft_array(x, p["cfg"]), x.shape[-1]
    def b(p, length, g):
        return (dsp.stft_adjoint(g, p["cfg"], length),)
    return f, b


@_register("istft", linear=True)
def _istft():
    def f(p, s):
        return dsp.istft_array(s, p["cfg"], p["length"]), s.shape[-2]
    def b(p, n_frames, g):
        return (dsp.istft_adjoint(g, p["cfg"], n_frames),)
    return f, b


@_register("istft_like")
def _istft_like():
    # istft to the length of a reference node (no gradient to the reference)
    def f(p, s, ref):
        return dsp.istft_array(s, p["cfg"], ref.shape[-1]), s.shape[-2]
    def b(p, n_frames, g):
        return dsp.istft_adjoint(g, p["cfg"], n_frames), None
    return f, b


@_register("cmvn")
def _cmvn():
    # per-row mean/variance normalization along the last axis
    def f(p, x):
        mu = x.mean(axis=-1, keepdims=True)
        d = x - mu
        inv = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + p["floor"])
        y = d * inv
        return y, (y, inv)
    def b(p, c, g):
        y, inv = c
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)
    return f, b


@_register("conv1d")
def _conv1d():
    # x (B, Cin, T), w (Cout, Cin, K), b (Cout,) -> (B, Cout, T-K+1), valid correlation
    def f(p, x, w, bias):
        k = w.shape[-1]
        t_out = x.shape[-1] - k + 1
        if t_out < 1:
            raise GraphError("conv1d input shorter than kernel")
        cols = np.stack([x[..., j:j + t_out] for j in range(k)], axis=-2)  # (B, Cin, K, Tout)
        y = np.einsum("bckt,ock->bot", cols, w, optimize=True) + bias[:, None]
        return y, (cols, w, x.shape)
    def b(p, c, g):
        cols, w, xshape = c
        k = w.shape[-1]
        t_out = g.shape[-1]
        gw = np.einsum("bot,bckt->ock", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2))
        gcols = np.einsum("bot,ock->bckt", g, w, optimize=True)
        gx = np.zeros(xshape)
        for j in range(k):
            gx[..., j:j + t_out] += gcols[..., j, :]
        return gx, gw, gb
    return f, b


def _same_corr2d(x, w):
    # "same" cross-correlation for odd kernels: x (B, Cin, H, W), w (Cout, Cin, kh, kw)
    kh, kw = w.shape[-2:]
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, Cin, H, W, kh, kw), a view
    return np.einsum("bchwij,ocij->bohw", win, w, optimize=True), win


@_register("conv2d")
def _conv2d():
    # x (B, Cin, H, W), w (Cout, Cin, kh, kw) with odd kh, kw, b (Cout,); zero "same" padding
    def f(p, x, w, bias):
        if w.shape[-1] % 2 == 0 or w.shape[-2] % 2 == 0:
            raise GraphError("conv2d needs odd kernel sizes")
        y, win = _same_corr2d(x, w)
        return y + bias[None, :, None, None], (win, w)
    def b(p, c, g):
        win, w = c
        gw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        # adjoint of "same" correlation: correlate with the flipped, channel-swapped kernel
        gx, _ = _same_corr2d(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
        return gx, gw, g.sum(axis=(0, 2, 3))
    return f, b


@_register("l2normalize")
def _l2normalize():
    def f(p, x):
        n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        y = x / n
        return y, (y, n)
    def b(p, c, g):
        y, n = c
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,)
    return f, b


@_register("nondiff")
def _nondiff():
    # y = fn(x) treated as a constant of x: used for piecewise-constant masks,
    # whose true derivative is zero almost everywhere
    def f(p, a):
        return np.asarray(p["fn"](a), dtype=np.float64), None
    def b(p, c, g):
        return (None,)
    return f, b


@_register("cosine")
def _cosine():
    def f(p, a, b):
        na = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
        nb = np.sqrt(np.sum(b * b, axis=-1, keepdims=True))
        ua, ub = a / na, b / nb
        s = np.sum(ua * ub, axis=-1)
        return s, (ua, ub, na, nb, s)
    def b(p, c, g):
        ua, ub, na, nb, s = c
        g = g[..., None]
        sk = s[..., None]
        ga = g * (ub - sk * ua) / na
        gb = g * (ua - sk * ub) / nb
        return ga, gb
    return f, b


# --- tape ---------------------------------------------------------------------

@dataclass
class DiffOp:
    kind: str
    inputs: tuple
    params: dict = field(default_factory=dict)


class Node:
    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.const(other)

    def __add__(self, o):
        return self.tape.apply("add", self, self._lift(o))

    def __radd__(self, o):
        return self.tape.apply("add", self._lift(o), self)

    def __sub__(self, o):
        return self.tape.apply("sub", self, self._lift(o))

    def __rsub__(self, o):
        return self.tape.apply("sub", self._lift(o), self)

    def __mul__(self, o):
        if isinstance(o, (int, float)):
            return self.tape.apply("scale", self, c=float(o))
        return self.tape.apply("mul", self, self._lift(o))

    def __rmul__(self, o):
        return self.__mul__(o)

    def __neg__(self):
        return self.tape.apply("scale", self, c=-1.0)

    def __matmul__(self, o):
        return self.tape.apply("matmul", self, self._lift(o))

    @property
    def value(self):
        return self.tape.value(self)


class Tape:
    """Recorded program of :class:`DiffOp` entries in topological order."""

    def __init__(self, check_finite: bool = True):
        self.ops: list[DiffOp] = []
        self.leaves: dict[str, int] = {}
        self.check_finite = check_finite
        self._values = None
        self._caches = None

    # building
    def leaf(self, name: str) -> Node:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf {name!r}")
        self.ops.append(DiffOp("leaf", (), {"name": name}))
        self.leaves[name] = len(self.ops) - 1
        return Node(self, len(self.ops) - 1)

    def const(self, value) -> Node:
        self.ops.append(DiffOp("const", (), {"value": np.asarray(value, dtype=np.float64)}))
        return Node(self, len(self.ops) - 1)

    def apply(self, kind: str, *inputs: Node, **params) -> Node:
        if kind not in OPS:
            raise GraphError(f"unknown op kind {kind!r}")
        for x in inputs:
            if x.tape is not self:
                raise GraphError("input node belongs to another tape")
        self.ops.append(DiffOp(kind, tuple(x.index for x in inputs), params))
        return Node(self, len(self.ops) - 1)

    def __getattr__(self, kind):
        # tape.log(x, eps=...), tape.conv1d(x, w, b), ...
        if kind in OPS:
            return lambda *inputs, **params: self.apply(kind, *inputs, **params)
        raise AttributeError(kind)

    # evaluation
    def forward(self, leaf_values: dict, output: Node | None = None):
        missing = set(self.leaves) - set(leaf_values)
        if missing:
            raise GraphError(f"unbound leaves: {sorted(missing)}")
        values = [None] * len(self.ops)
        caches = [None] * len(self.ops)
        for i, op in enumerate(self.ops):
            if op.kind == "leaf":
                values[i] = np.asarray(leaf_values[op.params["name"]], dtype=np.float64)
            elif op.kind == "const":
                values[i] = op.params["value"]
            else:
                y, cache = OPS[op.kind].forward(op.params, *(values[j] for j in op.inputs))
                values[i], caches[i] = y, cache
            if self.check_finite and not np.all(np.isfinite(values[i])):
                raise NonFiniteError(i, op.kind)
        self._values, self._caches = values, caches
        idx = len(self.ops) - 1 if output is None else output.index
        return values[idx]

    def value(self, node: Node):
        if self._values is None:
            raise GraphError("forward has not run")
        return self._values[node.index]

    def backward(self, seed=1.0, output: Node | None = None, wrt=None) -> dict:
        """Gradients of ``sum(seed * output)`` for every leaf (or those named in ``wrt``)."""
        if self._values is None:
            raise GraphError("backward called before forward")
        out = len(self.ops) - 1 if output is None else output.index
        grads = [None] * len(self.ops)
        grads[out] = np.broadcast_to(np.asarray(seed, dtype=np.float64),
                                     np.shape(self._values[out])).copy()
        needed = self._needed(out, wrt)
        for i in range(out, -1, -1):
            g = grads[i]
            op = self.ops[i]
            if g is None or op.kind in ("leaf", "const"):
                continue
            in_grads = OPS[op.kind].backward(op.params, self._caches[i], g)
            for j, gj in zip(op.inputs, in_grads):
                if gj is None or not needed[j]:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        names = self.leaves if wrt is None else wrt
        result = {}
        for name in names:
            idx = self.leaves[name]
            g = grads[idx]
            result[name] = np.zeros(np.shape(self._values[idx])) if g is None else g
        return result

    def _needed(self, out, wrt):
        # only propagate into ops that lead to a requested leaf
        targets = set(self.leaves.values()) if wrt is None else {self.leaves[n] for n in wrt}
        needed = [False] * len(self.ops)
        for i, op in enumerate(self.ops[:out + 1]):
            if i in targets:
                needed[i] = True
            elif op.kind not in ("leaf", "const"):
                needed[i] = any(needed[j] for j in op.inputs)
        return needed


def forward(tape: Tape, leaf_values: dict, output: Node | None = None):
    return tape.forward(leaf_values, output)


def backward(tape: Tape, seed=1.0, output: Node | None = None, wrt=None) -> dict:
    return tape.backward(seed, output, wrt)


def grad_check(tape: Tape, leaf_values: dict, leaf: str, probe_count: int = 10, step: float = 1e-3,
               output: Node | None = None, seed: int = 0, coords=None) -> float:
    """Worst relative error between reverse-mode and central-difference derivatives.

    The scalar under test is ``sum(output)``.  Relative error uses the
    denominator ``max(|a|, |b|, 1e-8)``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    values = {k: np.array(v, dtype=np.float64, copy=True) for k, v in leaf_values.items()}
    tape.forward(values, output)
    analytic = tape.backward(1.0, output, wrt=[leaf])[leaf]
    x = values[leaf]
    if coords is None:
        rng = np.random.default_rng(seed)
        coords = rng.choice(x.size, size=min(probe_count, x.size), replace=False)
    worst = 0.0
    flat = x.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        up = float(np.sum(tape.forward(values, output)))
        flat[c] = orig - step
        down = float(np.sum(tape.forward(values, output)))
        flat[c] = orig
        numeric = (up - down) / (2.0 * step)
        a = float(analytic.reshape(-1)[c])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    tape.forward(values, output)
    return worst
