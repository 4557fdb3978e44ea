"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a :class:`Tensor` that remembers its parents and a
backward rule mapping the output gradient to one gradient per parent.  ``backward`` replays
the recorded graph in reverse topological order.  Intermediate gradients live only for the
duration of one ``backward`` call; leaf tensors (parameters and inputs created with
``requires_grad=True``) accumulate into ``.grad``.

Recording state is thread-local, so each thread owns its own recording context.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread (inference)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def watch_kinks():
    """Record ``min |v|`` over every LeakyReLU input evaluated inside the block.

    Yields a one-element list holding the running minimum (``inf`` when no activation ran).
    """
    prev = getattr(_state, "kinks", None)
    box = [np.inf]
    _state.kinks = box
    try:
        yield box
    finally:
        _state.kinks = prev


def _note_kink(data: np.ndarray) -> None:
    box = getattr(_state, "kinks", None)
    if box is not None and data.size:
        box[0] = min(box[0], float(np.min(np.abs(data))))


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -------------------------------------------------------
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
        return mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation -------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``d self / d leaf`` into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data), requires_grad=True)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _recording() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _dtype_of(*ts: Tensor):
    floats = [t.data.dtype for t in ts if np.issubdtype(t.data.dtype, np.floating) and t.data.ndim > 0]
    return np.result_type(*floats) if floats else None


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    dt = _dtype_of(a, b)
    if dt is not None:
        if a.data.ndim == 0:
            a = Tensor(a.data.astype(dt), a.requires_grad) if not a.requires_grad else a
        if b.data.ndim == 0:
            b = Tensor(b.data.astype(dt), b.requires_grad) if not b.requires_grad else b
    return a, b


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sum_all(a: Tensor) -> Tensor:
    return _make(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),),
        "sum",
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
        "mean",
    )


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """``v if v > 0 else slope * v`` on every element."""
    _note_kink(a.data)
    pos = a.data > 0
    scale = np.where(pos, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def mse(a: Tensor, b) -> Tensor:
    """Mean of squared differences over every element."""
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    return mean_all(square(sub(a, b)))


# ---------------------------------------------------------------------------
# convolution


def _gather_taps(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """``(B, C, Hp, Wp)`` -> ``(k*k*C, B*Ho*Wo)`` column matrix, tap-major then channel."""
    b, c = xp.shape[:2]
    cols = np.empty((k, k, c, b, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride].transpose(
                1, 0, 2, 3
            )
    return cols.reshape(k * k * c, b * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Real 2-D cross-correlation with zero padding; weight is ``(Cout, Cin, k, k)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects (B, C, H, W) input and (Cout, Cin, k, k) weight")
    b, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if k != k2:
        raise ValueError("conv2d needs square kernels")
    if stride < 1:
        raise ValueError("stride must be positive")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d input smaller than kernel")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _gather_taps(xp, k, stride, ho, wo)
    w2 = weight.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = (w2 @ cols).reshape(cout, b, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, b * ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(k, k, cin, b, ho, wo)
            gxp = np.zeros((cin, b) + xp.shape[2:], dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


# (output component, input component) -> (bank index, sign) for Ŵ ⊗ q
HAMILTON_BLOCKS = (
    ((0, 1), (1, -1), (2, -1), (3, -1)),
    ((1, 1), (0, 1), (3, -1), (2, 1)),
    ((2, 1), (3, 1), (0, 1), (1, -1)),
    ((3, 1), (2, -1), (1, 1), (0, 1)),
)


def hamilton_weight(w0: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    """Assemble the ``(4Cout, 4Cin, k, k)`` real kernel that realises ``Ŵ ⊗ q``."""
    banks = (w0, w1, w2, w3)
    shape = w0.shape
    if any(bk.shape != shape for bk in banks):
        raise ValueError("quaternion kernel banks must share one shape")
    rows = [
        np.concatenate([sign * banks[idx].data for idx, sign in row], axis=1) for row in HAMILTON_BLOCKS
    ]
    out = np.concatenate(rows, axis=0)
    co, ci = shape[0], shape[1]

    def backward(g):
        grads = [np.zeros(shape, dtype=g.dtype) for _ in range(4)]
        for r, row in enumerate(HAMILTON_BLOCKS):
            for c, (idx, sign) in enumerate(row):
                block = g[r * co : (r + 1) * co, c * ci : (c + 1) * ci]
                if sign > 0:
                    grads[idx] += block
                else:
                    grads[idx] -= block
        return tuple(grads)

    return _make(out, banks, backward, "hamilton_weight")


def upsample_nearest2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, groups: int) -> Tensor:
    """Instance normalisation with component groups sharing one variance.

    ``x`` is ``(B, G*C, H, W)`` with group-major channel order.  Each of the ``G``
    components gets its own spatial mean; one scalar variance is pooled over all ``G``
    components and all pixels of a channel.  ``gamma`` has shape ``(C,)`` and scales every
    component; ``beta`` has shape ``(G, C)``.  ``groups=4`` is quaternion instance norm,
    ``groups=1`` the ordinary real one.
    """
    bsz, gc, h, w = x.shape
    c = gc // groups
    if c * groups != gc:
        raise ValueError(f"channel count {gc} not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (groups, c):
        raise ValueError(f"norm parameters mismatch: gamma {gamma.shape}, beta {beta.shape}, channels {c}")
    xv = x.data.reshape(bsz, groups, c, h, w)
    d = xv - xv.mean(axis=(3, 4), keepdims=True)
    var = np.mean(d * d, axis=(1, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = d * inv
    gam = gamma.data.reshape(1, 1, c, 1, 1)
    out = (xhat * gam + beta.data.reshape(1, groups, c, 1, 1)).reshape(x.shape)
    n = groups * h * w

    def backward(g):
        gv = g.reshape(bsz, groups, c, h, w)
        ggamma = np.sum(gv * xhat, axis=(0, 1, 3, 4)) if gamma.requires_grad else None
        gbeta = np.sum(gv, axis=(0, 3, 4)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = gv * gam
            gvar = -0.5 * np.sum(gxhat * d, axis=(1, 3, 4), keepdims=True) * inv**3
            gd = gxhat * inv + gvar * (2.0 / n) * d
            gx = (gd - gd.mean(axis=(3, 4), keepdims=True)).reshape(x.shape)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "instance_norm")


# ---------------------------------------------------------------------------
# finite-difference verification


class GradCheckReport:
    """Outcome of one :func:`grad_check` run."""

    def __init__(self, max_rel_error: float, per_input: dict[str, float], n_coords: int, nonfinite: list[str]):
        self.max_rel_error = max_rel_error
        self.per_input = per_input
        self.n_coords = n_coords
        self.nonfinite = nonfinite

    def passed(self, tol: float) -> bool:
        return not self.nonfinite and self.max_rel_error < tol

    def __repr__(self):
        return f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, coords={self.n_coords}, nonfinite={self.nonfinite})"


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    fn: Callable[[], Tensor],
    leaves: dict[str, Tensor],
    h: float = 1e-5,
    coords_per_input: int = 12,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``leaves`` maps names to the float64 leaf tensors ``fn`` reads (inputs and/or
    parameters); their ``.data`` is perturbed in place and restored.  Non-scalar outputs
    are contracted with a fixed random projection so every element contributes.
    ``coords_per_input`` coordinates are sampled per leaf (all of them for small leaves).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for name, t in leaves.items():
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 leaves; {name} is {t.dtype}")
    proj: dict[tuple, np.ndarray] = {}

    def scalar() -> Tensor:
        out = fn()
        if out.data.size == 1:
            return out.reshape(())
        if out.shape not in proj:
            prng = np.random.default_rng(12345)
            proj[out.shape] = prng.uniform(0.5, 1.5, size=out.shape) * prng.choice([-1.0, 1.0], size=out.shape)
        return sum_all(mul(out, proj[out.shape]))

    saved = {name: t.requires_grad for name, t in leaves.items()}
    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    scalar().backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in leaves.items()}
    for name, t in leaves.items():
        t.grad = None

    per_input: dict[str, float] = {}
    nonfinite: list[str] = []
    total = 0
    with no_grad():
        for name, t in leaves.items():
            if not np.all(np.isfinite(analytic[name])):
                nonfinite.append(name)
                per_input[name] = np.inf
                continue
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ValueError(f"leaf {name} must be contiguous to be perturbed in place")
            if flat.size <= coords_per_input:
                idx = np.arange(flat.size)
            else:
                idx = rng.choice(flat.size, coords_per_input, replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(scalar().data)
                flat[i] = orig - h
                fm = float(scalar().data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                if not np.isfinite(numeric):
                    nonfinite.append(name)
                    worst = np.inf
                    break
                worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric))
            per_input[name] = worst
            total += len(idx)
    for name, t in leaves.items():
        t.requires_grad = saved[name]
    max_err = max(per_input.values()) if per_input else 0.0
    return GradCheckReport(max_err, per_input, total, nonfinite)


def probe_away_from_kinks(
    resample: Callable[[np.random.Generator], None],
    fn: Callable[[], Tensor],
    rng: np.random.Generator,
    h: float = 1e-5,
    max_tries: int = 200,
) -> int:
    """Call ``resample(rng)`` until no LeakyReLU input of ``fn()`` lies within ``10*h`` of 0.

    Returns the number of draws used.
    """
    for attempt in range(1, max_tries + 1):
        resample(rng)
        with no_grad(), watch_kinks() as box:
            fn()
        if box[0] >= 10 * h:
            return attempt
    raise RuntimeError(f"no kink-free probe point found in {max_tries} draws")
