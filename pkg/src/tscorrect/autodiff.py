"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run engine. A ``Tape`` records every operation applied
to ``Var`` nodes together with a backward rule; ``Tape.backward`` replays
the records in reverse and accumulates adjoints. Values are numpy arrays
used purely as float64 storage and BLAS; all differentiation logic lives
here.

Conventions:
  * everything is float64, row-major;
  * no broadcasting beyond scalar-with-array (model code reshapes
    explicitly, e.g. bias rows via a ones-matmul), keeping every backward
    rule a plain transpose/sum;
  * subgradient choices at kinks: sign(0) = 0 for abs, indicator(x > 0)
    for relu;
  * a Tape and the Vars it produced are confined to one thread.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray

_ids = itertools.count()


def as_array(data) -> Array:
    """Coerce to a contiguous float64 ndarray."""
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Var:
    """A node in the computation graph: value, gradient, and identity."""

    __slots__ = ("value", "grad", "requires_grad", "node_id")

    def __init__(self, value, requires_grad: bool = False):
        self.value = as_array(value)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:  # pragma: no cover
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def zero_grads(params: Iterable[Var]) -> None:
    for p in params:
        p.zero_grad()


def _is_scalar(v: Var) -> bool:
    return v.value.size == 1


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Var, inputs: tuple[Var, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations; replayed in reverse by backward()."""

    def __init__(self):
        self._entries: list[_Entry] = []
        self._produced: set[int] = set()

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, value: Array, inputs: tuple[Var, ...], backward: Callable) -> Var:
        out = Var(value, requires_grad=any(v.requires_grad for v in inputs))
        self._entries.append(_Entry(out, inputs, backward))
        self._produced.add(out.node_id)
        return out

    # ---- graph roots -------------------------------------------------

    def constant(self, value) -> Var:
        """Wrap a raw array as a non-differentiable leaf."""
        return Var(value, requires_grad=False)

    # ---- linear algebra ----------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise DimensionError(
                f"matmul expects 2-D operands, got {a.value.shape} @ {b.value.shape}"
            )
        if a.value.shape[1] != b.value.shape[0]:
            raise DimensionError(
                f"matmul inner dimensions differ: {a.value.shape} @ {b.value.shape}"
            )

        def backward(g: Array):
            return g @ b.value.T, a.value.T @ g

        return self._record(a.value @ b.value, (a, b), backward)

    def conv1d(self, x: Var, w: Var, b: Var, stride: int = 1, padding: int = 0) -> Var:
        """1-D convolution (cross-correlation) along the last axis.

        x: (C_in, T) or batched (B, C_in, T); w: (C_out, C_in, k); b: (C_out,).
        Output length T_out = (T + 2*padding - k) // stride + 1.
        """
        if stride < 1 or padding < 0:
            raise DimensionError(f"conv1d needs stride >= 1, padding >= 0, got {stride}, {padding}")
        if w.value.ndim != 3:
            raise DimensionError(f"conv1d weight must be (C_out, C_in, k), got {w.value.shape}")
        batched = x.value.ndim == 3
        if not batched and x.value.ndim != 2:
            raise DimensionError(f"conv1d input must be (C_in, T) or (B, C_in, T), got {x.value.shape}")
        xv = x.value if batched else x.value[None]
        B, c_in, T = xv.shape
        c_out, c_in_w, k = w.value.shape
        if c_in != c_in_w:
            raise DimensionError(f"conv1d channel mismatch: input {c_in}, weight {c_in_w}")
        if b.value.shape != (c_out,):
            raise DimensionError(f"conv1d bias must be ({c_out},), got {b.value.shape}")
        if T + 2 * padding < k:
            raise DimensionError(f"conv1d window {k} exceeds padded length {T + 2 * padding}")
        t_out = (T + 2 * padding - k) // stride + 1

        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding))) if padding else xv
        # im2col: (B, T_out, C_in, k) -> GEMM against the flattened kernel.
        cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride]
        cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3))
        flat = cols.reshape(B * t_out, c_in * k)
        wf = w.value.reshape(c_out, c_in * k)
        out = (flat @ wf.T).reshape(B, t_out, c_out).transpose(0, 2, 1) + b.value[None, :, None]
        if not batched:
            out = out[0]

        def backward(g: Array):
            gv = g if batched else g[None]
            gf = np.ascontiguousarray(gv.transpose(0, 2, 1)).reshape(B * t_out, c_out)
            gw = (gf.T @ flat).reshape(c_out, c_in, k)
            gb = gf.sum(axis=0)
            gcols = (gf @ wf).reshape(B, t_out, c_in, k)
            gxp = np.zeros_like(xp)
            # stride makes the target slices disjoint for each kernel tap
            for j in range(k):
                gxp[:, :, j : j + stride * t_out : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, padding : padding + T] if padding else gxp
            return (gx if batched else gx[0]), gw, gb

        return self._record(out, (x, w, b), backward)

    # ---- elementwise ---------------------------------------------------

    def _coerce(self, other) -> Var:
        if isinstance(other, Var):
            return other
        return Var(np.asarray(other, dtype=np.float64))

    def _binary(self, a: Var, b: Var, fwd, bwd_a, bwd_b) -> Var:
        if not isinstance(a, Var):
            a = self._coerce(a)
        if not isinstance(b, Var):
            b = self._coerce(b)
        same = a.value.shape == b.value.shape
        if not (same or _is_scalar(a) or _is_scalar(b)):
            raise DimensionError(
                f"elementwise op supports same-shape or scalar-with-array only, "
                f"got {a.value.shape} and {b.value.shape}"
            )

        def backward(g: Array):
            ga = bwd_a(g)
            gb = bwd_b(g)
            if ga.shape != a.value.shape:
                ga = np.sum(ga).reshape(a.value.shape)
            if gb.shape != b.value.shape:
                gb = np.sum(gb).reshape(b.value.shape)
            return ga, gb

        return self._record(fwd(a.value, b.value), (a, b), backward)

    def add(self, a, b) -> Var:
        return self._binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g)

    def sub(self, a, b) -> Var:
        return self._binary(a, b, lambda x, y: x - y, lambda g: g, lambda g: -g)

    def mul(self, a, b) -> Var:
        if not isinstance(a, Var):
            a = self._coerce(a)
        if not isinstance(b, Var):
            b = self._coerce(b)
        return self._binary(a, b, lambda x, y: x * y, lambda g: g * b.value, lambda g: g * a.value)

    def scale(self, x: Var, c: float) -> Var:
        c = float(c)

        def backward(g: Array):
            return (g * c,)

        return self._record(x.value * c, (x,), backward)

    def abs(self, x: Var) -> Var:
        s = np.sign(x.value)  # sign(0) = 0

        def backward(g: Array):
            return (g * s,)

        return self._record(np.abs(x.value), (x,), backward)

    def relu(self, x: Var) -> Var:
        m = (x.value > 0.0).astype(np.float64)

        def backward(g: Array):
            return (g * m,)

        return self._record(x.value * m, (x,), backward)

    def reciprocal(self, x: Var) -> Var:
        if np.any(x.value == 0.0):
            raise ContractError("reciprocal of zero")
        inv = 1.0 / x.value

        def backward(g: Array):
            return (-g * inv * inv,)

        return self._record(inv, (x,), backward)

    # ---- reductions ----------------------------------------------------

    def _reduce_axes(self, x: Var, axes) -> tuple[int, ...]:
        nd = x.value.ndim
        if axes is None:
            return tuple(range(nd))
        if isinstance(axes, int):
            axes = (axes,)
        axes = tuple(int(a) for a in axes)
        for a in axes:
            if not -nd <= a < nd:
                raise DimensionError(f"reduce axis {a} out of range for shape {x.value.shape}")
        norm = tuple(sorted(a % nd for a in axes))
        if len(set(norm)) != len(norm):
            raise DimensionError(f"duplicate reduce axes {axes}")
        return norm

    def sum(self, x: Var, axes=None) -> Var:
        ax = self._reduce_axes(x, axes)
        shape = x.value.shape
        kept = tuple(1 if i in ax else s for i, s in enumerate(shape))

        def backward(g: Array):
            return (np.broadcast_to(g.reshape(kept), shape).copy(),)

        return self._record(x.value.sum(axis=ax if ax else None), (x,), backward)

    def mean(self, x: Var, axes=None) -> Var:
        ax = self._reduce_axes(x, axes)
        shape = x.value.shape
        kept = tuple(1 if i in ax else s for i, s in enumerate(shape))
        count = 1
        for a in ax:
            count *= shape[a]
        inv = 1.0 / count

        def backward(g: Array):
            return (np.broadcast_to(g.reshape(kept) * inv, shape).copy(),)

        return self._record(x.value.mean(axis=ax if ax else None), (x,), backward)

    # ---- shape moves ---------------------------------------------------

    def reshape(self, x: Var, shape: Sequence[int]) -> Var:
        shape = tuple(int(s) for s in shape)
        try:
            out = x.value.reshape(shape)  # metadata-only when contiguous
        except ValueError as e:
            raise DimensionError(f"cannot reshape {x.value.shape} to {shape}: {e}") from None

        orig = x.value.shape

        def backward(g: Array):
            return (g.reshape(orig),)

        return self._record(out, (x,), backward)

    def transpose(self, x: Var, axes: Sequence[int] | None = None) -> Var:
        nd = x.value.ndim
        if axes is None:
            axes = tuple(reversed(range(nd)))
        axes = tuple(int(a) for a in axes)
        if sorted(axes) != list(range(nd)):
            raise DimensionError(f"transpose axes {axes} invalid for shape {x.value.shape}")
        inv = np.argsort(axes)

        def backward(g: Array):
            return (g.transpose(inv),)

        return self._record(x.value.transpose(axes), (x,), backward)

    def concat(self, parts: Sequence[Var], axis: int = 0) -> Var:
        parts = list(parts)
        if not parts:
            raise DimensionError("concat of zero parts")
        nd = parts[0].value.ndim
        if not -nd <= axis < nd:
            raise DimensionError(f"concat axis {axis} out of range")
        axis = axis % nd
        for p in parts[1:]:
            if p.value.ndim != nd:
                raise DimensionError("concat rank mismatch")
            for d in range(nd):
                if d != axis and p.value.shape[d] != parts[0].value.shape[d]:
                    raise DimensionError(
                        f"concat shapes differ off-axis: {parts[0].value.shape} vs {p.value.shape}"
                    )
        sizes = [p.value.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward(g: Array):
            sl = [slice(None)] * nd
            outs = []
            for i in range(len(parts)):
                sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
                outs.append(g[tuple(sl)].copy())
            return tuple(outs)

        return self._record(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), backward)

    def stop_gradient(self, x: Var) -> Var:
        """Pass the value through; contribute zero gradient upstream."""

        def backward(g: Array):
            return (None,)

        return self._record(x.value, (x,), backward)

    # ---- reverse pass ----------------------------------------------------

    def backward(self, root: Var) -> None:
        """Accumulate d(root)/d(v) into v.grad for every requires_grad Var
        reachable from root. Repeated calls accumulate; zero_grad resets.
        """
        if root.value.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.value.shape}")
        if root.node_id not in self._produced:
            if root.requires_grad:
                root.grad += np.ones_like(root.value)
            return
        adjoint: dict[int, Array] = {root.node_id: np.ones_like(root.value)}
        for entry in reversed(self._entries):
            g = adjoint.pop(entry.out.node_id, None)
            if g is None:
                continue
            if entry.out.requires_grad:
                entry.out.grad += g
            grads = entry.backward(g)
            for v, gv in zip(entry.inputs, grads):
                if gv is None:
                    continue
                if v.node_id in self._produced:
                    if v.node_id in adjoint:
                        adjoint[v.node_id] = adjoint[v.node_id] + gv
                    else:
                        adjoint[v.node_id] = gv
                elif v.requires_grad:
                    v.grad += gv
