"""Dense float64 tensors and a tape-based reverse-mode gradient engine.

Everything is eager: each Graph method computes its result immediately with
numpy and records a node on the tape. ``Graph.backward`` replays the tape in
reverse construction order (a valid topological order, since inputs always
precede outputs) and accumulates gradients into the ``grad`` buffers of leaf
tensors that have one allocated. Leaves without a grad buffer (inputs,
targets, constants) are treated as non-differentiable.

All storage is float64; gradient checking at h ~ 1e-5 is meaningless in
single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

# When True, every recorded node's output is checked for NaN/Inf.
DEBUG_CHECK_FINITE = False

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    By convention the data buffer is immutable once the tensor has entered a
    graph; only ``grad`` is mutated (by ``Graph.backward``) and only the
    optimizer/grad-checker rewrite parameter data between graphs.
    """

    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data, grad=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None if grad is None else np.ascontiguousarray(grad, dtype=np.float64)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} does not match data shape {self.data.shape}"
            )
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def check_finite(self, name="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"{name} contains non-finite values")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"


class Node:
    """One tape entry: an op tag, input node ids, the produced tensor and a
    closure over the saved activations that computes input gradients."""

    __slots__ = ("op", "input_ids", "tensor", "backward_fn")

    def __init__(self, op, input_ids, tensor, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.tensor = tensor
        self.backward_fn = backward_fn


def _unbroadcast(g, shape):
    """Reduce a gradient back to ``shape`` by summing broadcasted axes."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _mT(x):
    return np.swapaxes(x, -1, -2)


class Graph:
    """Tape of eagerly evaluated operations.

    Confined to one thread of execution; independent graphs may run on
    different threads. Ops accept Tensors or plain scalars/arrays (coerced to
    constant leaves without gradients).
    """

    def __init__(self, check_finite=None):
        self.nodes: list[Node] = []
        self._owned: dict[int, int] = {}  # id(tensor) -> node index
        self.check_finite = DEBUG_CHECK_FINITE if check_finite is None else check_finite

    # -- tape plumbing ------------------------------------------------------

    def _node_for(self, t: Tensor) -> int:
        nid = self._owned.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), t, None))
            self._owned[id(t)] = nid
            t.node_id = nid
        return nid

    def as_tensor(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    def _record(self, op, inputs, out_data, backward_fn) -> Tensor:
        input_ids = tuple(self._node_for(t) for t in inputs)
        out = Tensor(out_data)
        if self.check_finite:
            out.check_finite(f"output of {op}")
        nid = len(self.nodes)
        self.nodes.append(Node(op, input_ids, out, backward_fn))
        self._owned[id(out)] = nid
        out.node_id = nid
        return out

    def retained_bytes(self) -> int:
        """Rough memory footprint of the tape (node outputs only)."""
        return sum(n.tensor.data.nbytes for n in self.nodes)

    # -- elementwise --------------------------------------------------------

    def add(self, a, b):
        a, b = self.as_tensor(a), self.as_tensor(b)
        _broadcast_shape(a.data, b.data, "add")
        ash, bsh = a.shape, b.shape

        def backward(g, need):
            return (
                _unbroadcast(g, ash) if need[0] else None,
                _unbroadcast(g, bsh) if need[1] else None,
            )

        return self._record("add", (a, b), a.data + b.data, backward)

    def sub(self, a, b):
        a, b = self.as_tensor(a), self.as_tensor(b)
        _broadcast_shape(a.data, b.data, "sub")
        ash, bsh = a.shape, b.shape

        def backward(g, need):
            return (
                _unbroadcast(g, ash) if need[0] else None,
                _unbroadcast(-g, bsh) if need[1] else None,
            )

        return self._record("sub", (a, b), a.data - b.data, backward)

    def mul(self, a, b):
        a, b = self.as_tensor(a), self.as_tensor(b)
        _broadcast_shape(a.data, b.data, "mul")
        ad, bd = a.data, b.data

        def backward(g, need):
            return (
                _unbroadcast(g * bd, ad.shape) if need[0] else None,
                _unbroadcast(g * ad, bd.shape) if need[1] else None,
            )

        return self._record("mul", (a, b), ad * bd, backward)

    def div(self, a, b):
        a, b = self.as_tensor(a), self.as_tensor(b)
        _broadcast_shape(a.data, b.data, "div")
        ad, bd = a.data, b.data

        def backward(g, need):
            return (
                _unbroadcast(g / bd, ad.shape) if need[0] else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if need[1] else None,
            )

        return self._record("div", (a, b), ad / bd, backward)

    def clip_min(self, a, floor):
        """Elementwise max(a, floor); gradient passes only where a > floor."""
        a = self.as_tensor(a)
        mask = a.data > floor

        def backward(g, need):
            return (g * mask,) if need[0] else (None,)

        return self._record("clip_min", (a,), np.maximum(a.data, floor), backward)

    def sqrt(self, a):
        a = self.as_tensor(a)
        y = np.sqrt(a.data)

        def backward(g, need):
            return (g * (0.5 / y),) if need[0] else (None,)

        return self._record("sqrt", (a,), y, backward)

    def gelu(self, a):
        """Tanh-approximation GELU: 0.5 x (1 + tanh(k (x + c x^3)))."""
        a = self.as_tensor(a)
        x = a.data
        t = np.asarray(x * x)  # asarray: ufuncs demote 0-d results to scalars
        t *= _GELU_C
        t += 1.0
        t *= _GELU_K * x
        np.tanh(t, out=t)
        out = np.asarray(t + 1.0)
        out *= x
        out *= 0.5

        def backward(g, need):
            if not need[0]:
                return (None,)
            du = np.asarray(x * x)
            du *= 3.0 * _GELU_C
            du += 1.0
            du *= _GELU_K
            du *= 1.0 - t * t
            du *= x
            du += 1.0 + t
            du *= 0.5
            du *= g
            return (du,)

        return self._record("gelu", (a,), out, backward)

    # -- reductions ---------------------------------------------------------

    def sum(self, a, axis=None, keepdims=False):
        a = self.as_tensor(a)
        shape = a.shape
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, need):
            if not need[0]:
                return (None,)
            if axis is None:
                return (np.broadcast_to(g, shape),)
            if not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(ax % len(shape) for ax in axes)
                kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
                g = g.reshape(kshape)
            return (np.broadcast_to(g, shape),)

        return self._record("sum", (a,), out, backward)

    def mean(self, a, axis=None, keepdims=False):
        a = self.as_tensor(a)
        count = a.size if axis is None else np.prod(
            [a.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )
        s = self.sum(a, axis=axis, keepdims=keepdims)
        return self.mul(s, 1.0 / float(count))

    # -- shape manipulation -------------------------------------------------

    def reshape(self, a, shape):
        a = self.as_tensor(a)
        shape = tuple(shape)
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
        old = a.shape

        def backward(g, need):
            return (g.reshape(old),) if need[0] else (None,)

        return self._record("reshape", (a,), a.data.reshape(shape), backward)

    def transpose(self, a, axes):
        a = self.as_tensor(a)
        axes = tuple(ax % a.ndim for ax in axes)
        inv = tuple(np.argsort(axes))

        def backward(g, need):
            return (g.transpose(inv),) if need[0] else (None,)

        return self._record("transpose", (a,), a.data.transpose(axes), backward)

    def swap_last(self, a):
        """Transpose the trailing two axes (matrix transpose of a batch)."""
        a = self.as_tensor(a)
        perm = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        return self.transpose(a, perm)

    def concat(self, parts, axis=-1):
        parts = [self.as_tensor(p) for p in parts]
        ax = axis % parts[0].ndim
        sizes = [p.shape[ax] for p in parts]
        out = np.concatenate([p.data for p in parts], axis=ax)
        offsets = np.cumsum(sizes)[:-1]

        def backward(g, need):
            pieces = np.split(g, offsets, axis=ax)
            return tuple(p if need[i] else None for i, p in enumerate(pieces))

        return self._record("concat", tuple(parts), out, backward)

    def slice(self, a, key):
        """Basic slicing with a tuple of ``slice`` objects (rank-preserving)."""
        a = self.as_tensor(a)
        key = tuple(key)
        if any(type(k) is not slice for k in key):
            raise ShapeError("slice: key must be a tuple of slice objects")
        shape = a.shape

        def backward(g, need):
            if not need[0]:
                return (None,)
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return self._record("slice", (a,), a.data[key].copy(), backward)

    def pad(self, a, pad_width):
        """Zero padding; ``pad_width`` is a (before, after) pair per axis."""
        a = self.as_tensor(a)
        pad_width = tuple((int(b), int(e)) for b, e in pad_width)
        key = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.shape))

        def backward(g, need):
            return (g[key].copy(),) if need[0] else (None,)

        return self._record("pad", (a,), np.pad(a.data, pad_width), backward)

    # -- linear algebra -----------------------------------------------------

    def matmul(self, a, b):
        a, b = self.as_tensor(a), self.as_tensor(b)
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(
                f"matmul: batch dimensions disagree for {a.shape} x {b.shape}"
            ) from None
        ad, bd = a.data, b.data

        if ad.ndim > 2 and bd.ndim == 2:
            # collapse leading dims into one BLAS call instead of a gemm loop
            lead = ad.shape[:-1]
            a2 = ad.reshape(-1, ad.shape[-1])
            out = (a2 @ bd).reshape(lead + (bd.shape[-1],))

            def backward(g, need):
                g2 = g.reshape(-1, bd.shape[-1])
                da = (g2 @ bd.T).reshape(ad.shape) if need[0] else None
                db = a2.T @ g2 if need[1] else None
                return (da, db)

            return self._record("matmul", (a, b), out, backward)

        def backward(g, need):
            da = _unbroadcast(np.matmul(g, _mT(bd)), ad.shape) if need[0] else None
            db = _unbroadcast(np.matmul(_mT(ad), g), bd.shape) if need[1] else None
            return (da, db)

        return self._record("matmul", (a, b), np.matmul(ad, bd), backward)

    def affine(self, x, w, b):
        """Fused x @ w + b for 2-D weights and 1-D bias; falls back to the
        matmul/add composition otherwise."""
        x, w, b = self.as_tensor(x), self.as_tensor(w), self.as_tensor(b)
        if w.ndim != 2 or b.ndim != 1 or x.ndim < 2:
            return self.add(self.matmul(x, w), b)
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"affine: inner dimensions disagree for {x.shape} x {w.shape}")
        if b.shape[0] != w.shape[1]:
            raise ShapeError(f"affine: bias {b.shape} does not match weight {w.shape}")
        xd, wd = x.data, w.data
        x2 = xd.reshape(-1, xd.shape[-1])
        out = x2 @ wd
        out += b.data
        out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

        def backward(g, need):
            g2 = g.reshape(-1, wd.shape[1])
            return (
                (g2 @ wd.T).reshape(xd.shape) if need[0] else None,
                x2.T @ g2 if need[1] else None,
                g2.sum(axis=0) if need[2] else None,
            )

        return self._record("affine", (x, w, b), out, backward)

    def stencil3x3(self, x, w):
        """Zero-padded 3x3 stencil contraction over a grid of feature rows.

        ``x`` is (..., gh, gw, cin). ``w`` is (3, 3, cin, cout) applied at
        every grid point, or (H, 3, 3, cin, cout) with x (..., H, gh, gw, cin)
        for one stencil per group along axis -4. Output (..., [gh, gw], cout).
        Fused into one tape node: the nine shifted matmuls stay off the tape.
        """
        x, w = self.as_tensor(x), self.as_tensor(w)
        xd, wd = x.data, w.data
        if xd.ndim < 3:
            raise ShapeError(f"stencil3x3: input must be (..., gh, gw, cin), got {xd.shape}")
        headed = wd.ndim == 5
        if not headed and wd.ndim != 4:
            raise ShapeError(f"stencil3x3: weights must be rank 4 or 5, got {wd.shape}")
        if wd.shape[-4:-2] != (3, 3):
            raise ShapeError(f"stencil3x3: expected a 3x3 stencil, got {wd.shape}")
        if headed and (xd.ndim < 4 or xd.shape[-4] != wd.shape[0]):
            raise ShapeError(
                f"stencil3x3: group axis of {xd.shape} does not match weights {wd.shape}"
            )
        gh, gw, cin = xd.shape[-3:]
        if wd.shape[-2] != cin:
            raise ShapeError(f"stencil3x3: {cin} input channels vs weights {wd.shape}")
        cout = wd.shape[-1]
        n = gh * gw
        lead = xd.shape[:-3]

        xp = np.pad(xd, ((0, 0),) * (xd.ndim - 3) + ((1, 1), (1, 1), (0, 0)))

        def tap(dy, dx):
            # (H, cin, cout) aligns with flattened windows (..., H, n, cin)
            return wd[:, dy, dx] if headed else wd[dy, dx]

        # materialize the nine shifted windows once; backward reuses them
        windows = {}
        out = None
        for dy in range(3):
            for dx in range(3):
                rows = xp[..., dy : dy + gh, dx : dx + gw, :].reshape(lead + (n, cin))
                windows[dy, dx] = rows
                term = np.matmul(rows, tap(dy, dx))
                if out is None:
                    out = term
                else:
                    out += term
        out = out.reshape(lead + (gh, gw, cout))

        def backward(g, need):
            g_rows = g.reshape(lead + (n, cout))
            dx_full = None
            if need[0]:
                dxp = np.zeros_like(xp)
                for dy in range(3):
                    for dx in range(3):
                        contrib = np.matmul(g_rows, _mT(tap(dy, dx)))
                        dxp[..., dy : dy + gh, dx : dx + gw, :] += contrib.reshape(
                            lead + (gh, gw, cin)
                        )
                dx_full = np.ascontiguousarray(dxp[..., 1 : gh + 1, 1 : gw + 1, :])
            dw = None
            if need[1]:
                dw = np.zeros_like(wd)
                for dy in range(3):
                    for dx in range(3):
                        rows = windows[dy, dx]
                        if headed:
                            prod = np.matmul(_mT(rows), g_rows)  # (..., H, cin, cout)
                            dw[:, dy, dx] = prod.reshape((-1,) + prod.shape[-3:]).sum(axis=0)
                        else:
                            dw[dy, dx] = rows.reshape(-1, cin).T @ g_rows.reshape(-1, cout)
            return (dx_full, dw)

        return self._record("stencil3x3", (x, w), out, backward)

    # -- normalization / activation ----------------------------------------

    def softmax(self, a, axis=-1):
        """Numerically stable softmax; output sums to 1 along ``axis``."""
        a = self.as_tensor(a)
        ax = axis % a.ndim
        y = a.data - a.data.max(axis=ax, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=ax, keepdims=True)

        def backward(g, need):
            if not need[0]:
                return (None,)
            if ax == y.ndim - 1:
                dx = g - np.einsum("...i,...i->...", g, y)[..., None]
            else:
                dx = g - (g * y).sum(axis=ax, keepdims=True)
            dx *= y
            return (dx,)

        return self._record("softmax", (a,), y, backward)

    def layer_norm(self, x, gain, bias, eps=1e-5):
        """Normalize over the last axis, then apply an elementwise affine."""
        x, gain, bias = self.as_tensor(x), self.as_tensor(gain), self.as_tensor(bias)
        if eps <= 0:
            raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
        c = x.shape[-1]
        if gain.shape != (c,) or bias.shape != (c,):
            raise ShapeError(
                f"layer_norm: gain/bias must have shape ({c},), got {gain.shape}/{bias.shape}"
            )
        mu = x.data.mean(axis=-1, keepdims=True)
        xhat = x.data - mu
        var = (xhat * xhat).mean(axis=-1, keepdims=True)
        var += eps
        np.sqrt(var, out=var)
        inv = np.divide(1.0, var, out=var)
        xhat *= inv
        out = xhat * gain.data
        out += bias.data
        gd = gain.data

        def backward(g, need):
            dxhat = g * gd
            dx = None
            if need[0]:
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                dx = inv * (dxhat - m1 - xhat * m2)
            dgain = (g * xhat).reshape(-1, c).sum(axis=0) if need[1] else None
            dbias = g.reshape(-1, c).sum(axis=0) if need[2] else None
            return (dx, dgain, dbias)

        return self._record("layer_norm", (x, gain, bias), out, backward)

    # -- reverse sweep ------------------------------------------------------

    def backward(self, loss: Tensor):
        """Populate grad buffers of every reachable leaf that has one.

        Fan-out accumulates by summation; each tape node is visited exactly
        once. Raises ContractError if ``loss`` is not a scalar of this graph.
        """
        if loss.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        root = self._owned.get(id(loss))
        if root is None:
            raise ContractError("backward: loss tensor is not part of this graph")

        n = len(self.nodes)
        needs = [False] * n
        for i, node in enumerate(self.nodes):
            if node.backward_fn is None:
                needs[i] = node.tensor.grad is not None
            else:
                needs[i] = any(needs[j] for j in node.input_ids)

        grads: list = [None] * n
        grads[root] = np.ones_like(loss.data)
        for i in range(root, -1, -1):
            g = grads[i]
            grads[i] = None
            if g is None or not needs[i]:
                continue
            node = self.nodes[i]
            if node.backward_fn is None:
                node.tensor.grad += g.reshape(node.tensor.shape)
                continue
            need = tuple(needs[j] for j in node.input_ids)
            input_grads = node.backward_fn(g, need)
            for j, ig in zip(node.input_ids, input_grads):
                if ig is None:
                    continue
                # accumulate without in-place mutation: backward closures may
                # return views/aliases of upstream gradient buffers
                grads[j] = ig if grads[j] is None else grads[j] + ig


# -- finite-difference gradient checking ------------------------------------


@dataclass
class GradCheckReport:
    """Central-difference vs analytic gradient comparison for every entry."""

    max_rel_error: float
    worst_param: str
    worst_index: tuple
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        lines = [
            f"grad check: max rel error {self.max_rel_error:.3e} "
            f"(param '{self.worst_param}' at {self.worst_index}), "
            f"tol {self.tol:.1e} -> {'PASS' if self.passed else 'FAIL'}"
        ]
        for name, err in self.per_param.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(f, params, h=1e-5, tol=1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f(graph, params)`` must build and return a scalar loss tensor. Every
    entry of every parameter is perturbed by +/-h; the relative error uses
    max(|analytic|, |numeric|, 1e-6) as denominator so that near-zero
    gradients are judged on an absolute scale of the same tolerance.
    """
    if not (1e-6 <= h <= 1e-4):
        raise ConfigError(f"grad_check: h must be in [1e-6, 1e-4], got {h}")

    params.zero_grads()
    g = Graph()
    loss = f(g, params)
    if loss.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is non-finite at the base point")
    g.backward(loss)
    analytic = {name: t.grad.copy() for name, t in params.items()}

    def probe(name):
        val = float(f(Graph(), params).data)
        if not math.isfinite(val):
            raise NumericError(f"grad_check: non-finite loss while probing parameter '{name}'")
        return val

    max_err, worst_param, worst_index = 0.0, "", ()
    per_param = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        param_err = 0.0
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + h
            f_plus = probe(name)
            flat[idx] = saved - h
            f_minus = probe(name)
            flat[idx] = saved
            num = (f_plus - f_minus) / (2.0 * h)
            err = abs(num - ana[idx]) / max(abs(num), abs(ana[idx]), 1e-6)
            if err > param_err:
                param_err = err
            if err > max_err:
                max_err = err
                worst_param = name
                worst_index = np.unravel_index(idx, t.shape)
        per_param[name] = param_err

    return GradCheckReport(max_err, worst_param, worst_index, tol, per_param)
