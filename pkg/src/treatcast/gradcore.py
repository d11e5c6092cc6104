"""Minimal numerical engine: numpy tensors, reverse-mode autodiff, Adam.

Values are float64 numpy arrays throughout. A Tape records nodes in
creation order, which is already a topological order, so the reverse
sweep is a single backwards pass over the node list. Constants (tensors
with no tape) are skipped by the sweep, which doubles as a zero-overhead
inference mode: running the same forward code with constant leaves
records nothing.

Gradient accumulation avoids copies where it can: the first contribution
to a node may alias the upstream array and a private copy is made only
when a second contribution arrives.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GradError",
    "Tensor",
    "Tape",
    "const",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "tanh",
    "sigmoid",
    "log",
    "clip",
    "tsum",
    "reshape",
    "concat",
    "field_contract",
    "stop_gradient",
    "MLPSpec",
    "mlp_param_shapes",
    "init_mlp",
    "mlp_apply",
    "mlp_field_step",
    "rk4_axpy",
    "rk4_combine",
    "ParamStore",
    "params_digest",
    "finite_difference_gradient",
]


class GradError(ValueError):
    """Structural misuse of the engine (shapes, non-scalar roots, ...)."""


class Tensor:
    __slots__ = ("data", "grad", "tape", "_backward", "_gown")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self._backward = None
        self._gown = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, taped={self.tape is not None})"

    # Operator sugar; scalars and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of taped tensors; creation order is topological."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self)
        self._nodes.append(t)
        return t

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        if root.tape is not self:
            raise GradError("backward root does not belong to this tape")
        if root.data.ndim != 0:
            raise GradError("backward root must be a scalar")
        root.grad = np.ones((), dtype=np.float64)
        root._gown = True
        for node in reversed(self._nodes):
            bw = node._backward
            if bw is not None and node.grad is not None:
                bw(node.grad)


def const(x) -> Tensor:
    return Tensor(x, None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, None)


def _tape_of(*tensors):
    for t in tensors:
        if t.tape is not None:
            return t.tape
    return None


def _make(data, tape, backward) -> Tensor:
    out = Tensor(data, tape)
    if tape is not None:
        out._backward = backward
        tape._nodes.append(out)
    return out


def _acc(t: Tensor, g) -> None:
    if t.tape is None:
        return
    if t.grad is None:
        t.grad = g
        t._gown = False
    elif t._gown:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._gown = True


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    data = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(data, tape, bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    data = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(data, tape, bw)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _acc(a, -g)

    return _make(-a.data, a.tape, bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    data = a.data * b.data

    def bw(g):
        if a.tape is not None:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if b.tape is not None:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, tape, bw)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise GradError("matmul expects 2-D operands")
    tape = _tape_of(a, b)
    data = a.data @ b.data

    def bw(g):
        if a.tape is not None:
            _acc(a, g @ b.data.T)
        if b.tape is not None:
            _acc(b, a.data.T @ g)

    return _make(data, tape, bw)


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - y * y))

    return _make(y, a.tape, bw)


def _sigmoid_stable(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = _sigmoid_stable(np.asarray(a.data, dtype=np.float64))

    def bw(g):
        _acc(a, g * y * (1.0 - y))

    return _make(y, a.tape, bw)


def log(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _acc(a, g / a.data)

    return _make(np.log(a.data), a.tape, bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is strictly inside."""
    a = _wrap(a)
    data = np.clip(a.data, lo, hi)

    def bw(g):
        _acc(a, g * ((a.data > lo) & (a.data < hi)))

    return _make(data, a.tape, bw)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape))
        else:
            g2 = g if keepdims else np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g2, a.data.shape))

    return _make(data, a.tape, bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), a.tape, bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    tape = _tape_of(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _make(data, tape, bw)


def field_contract(a, dx, latent_dim: int) -> Tensor:
    """Contract a flattened matrix field with a control derivative.

    a holds rows of latent_dim x n_channels matrices flattened to
    (batch, latent_dim * n_channels); dx is a constant (batch, n_channels)
    array. Returns (batch, latent_dim).
    """
    a = _wrap(a)
    dx = np.asarray(dx, dtype=np.float64)
    n, c = dx.shape
    if a.data.shape != (n, latent_dim * c):
        raise GradError("field_contract shape mismatch")
    a3 = a.data.reshape(n, latent_dim, c)
    data = (a3 @ dx[:, :, None])[:, :, 0]

    def bw(g):
        _acc(a, (g[:, :, None] * dx[:, None, :]).reshape(n, latent_dim * c))

    return _make(data, a.tape, bw)


def stop_gradient(a) -> Tensor:
    """Detach: same values, no tape, so no gradient flows through."""
    a = _wrap(a)
    return Tensor(a.data, None)


@dataclass(frozen=True)
class MLPSpec:
    """Affine+activation stack: n_hidden tanh layers, then a final map."""

    in_dim: int
    out_dim: int
    hidden: int
    n_hidden: int
    final: str = "identity"  # identity | tanh | sigmoid

    def __post_init__(self):
        if self.final not in ("identity", "tanh", "sigmoid"):
            raise GradError(f"unknown final activation {self.final!r}")


def mlp_param_shapes(spec: MLPSpec) -> dict:
    dims = [spec.in_dim] + [spec.hidden] * spec.n_hidden + [spec.out_dim]
    shapes = {}
    for i in range(len(dims) - 1):
        shapes[f"w{i}"] = (dims[i], dims[i + 1])
        shapes[f"b{i}"] = (dims[i + 1],)
    return shapes


def init_mlp(store: "ParamStore", prefix: str, spec: MLPSpec, rng: np.random.Generator) -> None:
    """Uniform fan-in init, biases bounded by their layer's fan-in."""
    dims = [spec.in_dim] + [spec.hidden] * spec.n_hidden + [spec.out_dim]
    for i in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[i])
        store.add(f"{prefix}.w{i}", rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])))
        store.add(f"{prefix}.b{i}", rng.uniform(-bound, bound, size=(dims[i + 1],)))


def _mlp_collect(params, prefix: str, spec: MLPSpec):
    n_layers = spec.n_hidden + 1
    ws = [params[f"{prefix}.w{i}"] for i in range(n_layers)]
    bs = [params[f"{prefix}.b{i}"] for i in range(n_layers)]
    return ws, bs


def _mlp_forward(ws, bs, spec: MLPSpec, x_data, prefix: str):
    """Plain-numpy stack evaluation; returns the output and every layer's
    post-activation value (caches for the hand-written backward)."""
    if x_data.ndim != 2:
        raise GradError("mlp_apply expects 2-D operands")
    last = spec.n_hidden
    hs = [x_data]
    h = x_data
    for i, (w, b) in enumerate(zip(ws, bs)):
        if h.shape[-1] != w.data.shape[0]:
            raise GradError(
                f"mlp_apply: input width {h.shape[-1]} does not match "
                f"{prefix}.w{i} fan-in {w.data.shape[0]}"
            )
        h = h @ w.data
        h += b.data
        if i < last or spec.final == "tanh":
            np.tanh(h, out=h)
        elif spec.final == "sigmoid":
            h = _sigmoid_stable(h)
        hs.append(h)
    return h, hs


def _mlp_backward(g, ws, bs, spec: MLPSpec, hs, x: Tensor) -> None:
    # g is upstream state that may alias other tensors' grads: never mutated.
    last = spec.n_hidden
    for i in range(last, -1, -1):
        y = hs[i + 1]
        if i < last or spec.final == "tanh":
            gl = np.multiply(y, y)
            np.subtract(1.0, gl, out=gl)
            np.multiply(g, gl, out=gl)
        elif spec.final == "sigmoid":
            gl = np.subtract(1.0, y)
            np.multiply(y, gl, out=gl)
            np.multiply(g, gl, out=gl)
        else:
            gl = g
        w, b, hin = ws[i], bs[i], hs[i]
        if b.tape is not None:
            _acc(b, _unbroadcast(gl, b.data.shape))
        if w.tape is not None:
            _acc(w, hin.T @ gl)
        if i > 0 or x.tape is not None:
            g = gl @ w.data.T
    if x.tape is not None:
        _acc(x, g)


def mlp_apply(params, prefix: str, spec: MLPSpec, x: Tensor) -> Tensor:
    """Run the stack; params maps full names to Tensors (taped or constant).

    The whole stack is a single tape node: the forward pass is plain numpy
    and the backward pass walks the cached layer values by hand, which keeps
    the per-op bookkeeping off the training hot path."""
    x = _wrap(x)
    ws, bs = _mlp_collect(params, prefix, spec)
    out, hs = _mlp_forward(ws, bs, spec, x.data, prefix)
    tape = _tape_of(x, *ws, *bs)

    def bw(g):
        _mlp_backward(g, ws, bs, spec, hs, x)

    return _make(out, tape, bw)


def mlp_field_step(params, prefix: str, spec: MLPSpec, x, dx,
                   latent_dim: int) -> Tensor:
    """Fused mlp_apply + field_contract: evaluate the flattened matrix field
    at x and contract it with the constant control derivative dx. One tape
    node instead of a dozen; identical arithmetic to the composition."""
    x = _wrap(x)
    dx = np.asarray(dx, dtype=np.float64)
    ws, bs = _mlp_collect(params, prefix, spec)
    out, hs = _mlp_forward(ws, bs, spec, x.data, prefix)
    n, c = dx.shape
    if out.shape != (n, latent_dim * c):
        raise GradError("field_contract shape mismatch")
    data = (out.reshape(n, latent_dim, c) @ dx[:, :, None])[:, :, 0]
    tape = _tape_of(x, *ws, *bs)

    def bw(g):
        ga = np.einsum("nl,nc->nlc", g, dx).reshape(n, latent_dim * c)
        _mlp_backward(ga, ws, bs, spec, hs, x)

    return _make(data, tape, bw)


def rk4_axpy(z: Tensor, k: Tensor, s: float) -> Tensor:
    """z + s*k as one node (the half/full-step state updates inside RK4)."""
    data = z.data + k.data * s

    def bw(g):
        _acc(z, g)
        _acc(k, g * s)

    return _make(data, _tape_of(z, k), bw)


def rk4_combine(z: Tensor, k1: Tensor, k2: Tensor, k3: Tensor, k4: Tensor,
                dt: float) -> Tensor:
    """The classical RK4 state update z + dt/6*(k1 + 2k2 + 2k3 + k4)."""
    data = z.data + ((k1.data + k4.data) + (k2.data + k3.data) * 2.0) * (dt / 6.0)

    def bw(g):
        _acc(z, g)
        ge = g * (dt / 6.0)
        _acc(k1, ge)
        _acc(k4, ge)
        gm = g * (dt / 3.0)
        _acc(k2, gm)
        _acc(k3, gm)

    return _make(data, _tape_of(z, k1), bw)


class ParamStore:
    """Named float64 parameter blocks with gradient accumulators and Adam state."""

    def __init__(self):
        self._values = {}
        self._grads = {}
        self._m = {}
        self._v = {}
        self._t = 0

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise GradError(f"duplicate parameter block {name!r}")
        v = np.array(value, dtype=np.float64)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)
        self._m[name] = np.zeros_like(v)
        self._v[name] = np.zeros_like(v)

    def names(self):
        return list(self._values)

    def __contains__(self, name):
        return name in self._values

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def leaves(self, tape: Tape) -> dict:
        return {name: tape.leaf(v) for name, v in self._values.items()}

    def constants(self) -> dict:
        return {name: Tensor(v, None) for name, v in self._values.items()}

    def collect(self, leaves: dict) -> None:
        for name, leaf in leaves.items():
            if leaf.grad is not None:
                self._grads[name] += leaf.grad

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def adam_step(self, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        self._t += 1
        c1 = 1.0 - beta1 ** self._t
        c2 = 1.0 - beta2 ** self._t
        for name, value in self._values.items():
            g = self._grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * (g * g)
            value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    def state_dict(self) -> dict:
        return {name: v.copy() for name, v in self._values.items()}

    def load_values(self, state: dict) -> None:
        for name, v in state.items():
            if name not in self._values:
                raise GradError(f"unknown parameter block {name!r}")
            if self._values[name].shape != v.shape:
                raise GradError(f"shape mismatch for block {name!r}")
            self._values[name][...] = v

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "format": "treatcast-params",
            "version": 1,
            "blocks": {name: list(v.shape) for name, v in self._values.items()},
        }
        if extra_meta:
            meta["extra"] = extra_meta
        arrays = {f"block/{name}": v for name, v in self._values.items()}
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with np.load(path) as z:
            if "__meta__" not in z:
                raise GradError("checkpoint missing version header")
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format") != "treatcast-params" or meta.get("version") != 1:
                raise GradError("unsupported checkpoint version")
            store = cls()
            for name, shape in meta["blocks"].items():
                arr = z[f"block/{name}"]
                if list(arr.shape) != shape or arr.dtype != np.float64:
                    raise GradError(f"corrupt checkpoint block {name!r}")
                store.add(name, arr)
        return store, meta.get("extra", {})


def params_digest(store: ParamStore) -> str:
    """Content digest over sorted (name, shape, raw bytes); file-layout independent."""
    h = hashlib.sha256()
    for name in sorted(store.names()):
        v = store.value(name)
        h.update(name.encode())
        h.update(str(v.shape).encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def finite_difference_gradient(f, arrays: dict, step: float = 1e-5) -> dict:
    """Central differences of a scalar f(arrays) per entry of each array.

    Arrays are perturbed in place and restored; f must not cache them.
    """
    grads = {}
    for name, a in arrays.items():
        g = np.zeros_like(a)
        flat = a.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(arrays)
            flat[i] = orig - step
            fm = f(arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads
