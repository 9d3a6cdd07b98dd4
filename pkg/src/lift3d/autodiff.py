"""A small reverse-mode autodiff engine over numpy arrays.

The primitive set is closed: only the operations the renderer and the loss
need are provided, and shapes must match exactly (no implicit broadcasting;
use :func:`expand` when a value has to be repeated along an axis).

    >>> x = const(np.ones((2, 3)))
    >>> W = Var(np.zeros((3, 4)), requires_grad=True)
    >>> b = Var(np.zeros(4), requires_grad=True)
    >>> loss = sum_all(linear(x, W, b))
    >>> backward(loss)
    >>> W.grad.shape
    (3, 4)
"""

from __future__ import annotations

import contextlib
import json
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build values only; no backward closures are recorded."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "grad", "op", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.parents = ()
        self.backward_fn = None
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # thin operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, backward_fn, op):
    out = Var(value)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _same_shape(a: Var, b: Var, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Var:
    a, b = const(a), const(b)
    _same_shape(a, b, "add")
    return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    _same_shape(a, b, "sub")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, c: float) -> Var:
    a = const(a)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def relu(x) -> Var:
    x = const(x)
    y = np.maximum(x.value, 0)
    return _node(y, (x,), lambda g: (g * (y > 0),), "relu")


def sigmoid(x) -> Var:
    x = const(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softplus(x) -> Var:
    x = const(x)
    v = x.value
    y = np.logaddexp(0, v).astype(v.dtype)
    s = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _node(y, (x,), lambda g: (g * s,), "softplus")


def exp(x) -> Var:
    x = const(x)
    y = np.exp(x.value)
    return _node(y, (x,), lambda g: (g * y,), "exp")


# --------------------------------------------------------------------------
# structural


def linear(x, W, b) -> Var:
    """x (..., in) @ W (in, out) + b (out,)."""
    x, W, b = const(x), const(W), const(b)
    if W.value.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    xv, Wv = x.value, W.value
    # flatten to 2D: one GEMM instead of a stack of tiny batched products
    x2 = xv.reshape(-1, xv.shape[-1])
    out = (x2 @ Wv + b.value).reshape(xv.shape[:-1] + (Wv.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ Wv.T).reshape(xv.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _node(out, (x, W, b), bw, "linear")


def concat(xs, axis=-1) -> Var:
    xs = [const(x) for x in xs]
    ax = axis % xs[0].value.ndim
    for x in xs[1:]:
        if x.value.ndim != xs[0].value.ndim or any(
            x.shape[d] != xs[0].shape[d] for d in range(x.value.ndim) if d != ax
        ):
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {x.shape} on axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in xs], axis=ax)
    return _node(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def expand(x, axis: int, n: int) -> Var:
    """Insert a new axis at ``axis`` and repeat the value n times along it."""
    x = const(x)
    ax = axis % (x.value.ndim + 1)
    out = np.repeat(np.expand_dims(x.value, ax), n, axis=ax)
    return _node(out, (x,), lambda g: (g.sum(axis=ax),), "expand")


def reshape(x, shape) -> Var:
    x = const(x)
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def slice_last(x, start: int, stop: int) -> Var:
    x = const(x)
    v = x.value

    def bw(g):
        full = np.zeros_like(v)
        full[..., start:stop] = g
        return (full,)

    return _node(v[..., start:stop], (x,), bw, "slice")


def take(x, idx, unique: bool = False) -> Var:
    """Rows of x along axis 0; ``unique`` promises no repeated indices."""
    x = const(x)
    idx = np.asarray(idx)
    v = x.value

    def bw(g):
        full = np.zeros_like(v)
        if unique:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(v[idx], (x,), bw, "take")


def segment_sum(x, seg, n: int) -> Var:
    """out[k] = sum of x[p] over rows p with seg[p] == k; x is (P, C)."""
    x = const(x)
    seg = np.asarray(seg)
    if x.value.ndim != 2 or seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_sum: x {x.shape}, seg {seg.shape}")
    out = np.zeros((n, x.shape[1]), dtype=x.value.dtype)
    np.add.at(out, seg, x.value)
    return _node(out, (x,), lambda g: (g[seg],), "segment_sum")


def sparse_matmul(S, x) -> Var:
    """S (scipy sparse, Q x P) @ x (P, C); S is a constant."""
    x = const(x)
    if S.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: S {S.shape} vs x {x.shape}")
    return _node(np.asarray(S @ x.value), (x,), lambda g: (np.asarray(S.T @ g),), "sparse_matmul")


# --------------------------------------------------------------------------
# reductions


def sum_all(x) -> Var:
    x = const(x)
    shp, dt = x.shape, x.value.dtype
    return _node(np.asarray(x.value.sum(), dtype=dt), (x,), lambda g: (np.full(shp, g, dtype=dt),), "sum_all")


def sum_axis(x, axis: int) -> Var:
    x = const(x)
    ax = axis % x.value.ndim
    n = x.shape[ax]
    return _node(x.value.sum(axis=ax), (x,), lambda g: (np.repeat(np.expand_dims(g, ax), n, axis=ax),), "sum_axis")


def cumsum_exclusive(x, axis: int = -1) -> Var:
    """out[j] = sum_{k<j} x[k] along ``axis``."""
    x = const(x)
    v = x.value
    ax = axis % v.ndim
    c = np.cumsum(v, axis=ax)
    out = np.concatenate([np.zeros_like(np.take(c, [0], axis=ax)), np.take(c, np.arange(v.shape[ax] - 1), axis=ax)], axis=ax)

    def bw(g):
        # d out[j] / d x[k] = 1 for k < j  ->  grad x[k] = sum_{j>k} g[j]
        rev = np.flip(np.cumsum(np.flip(g, axis=ax), axis=ax), axis=ax)
        shifted = np.concatenate([np.take(rev, np.arange(1, v.shape[ax]), axis=ax), np.zeros_like(np.take(rev, [0], axis=ax))], axis=ax)
        return (shifted,)

    return _node(out, (x,), bw, "cumsum_exclusive")


def mse(a, b) -> Var:
    a, b = const(a), const(b)
    _same_shape(a, b, "mse")
    d = a.value - b.value
    n = d.size
    out = np.asarray((d * d).sum() / n, dtype=d.dtype)

    def bw(g):
        ga = (2.0 / n) * g * d
        return ga, -ga

    return _node(out, (a, b), bw, "mse")


def max_over_axis(x, axis: int, mask=None) -> Var:
    """Max along ``axis``; masked-out entries are ignored.

    Where every entry is masked the result is 0. The gradient goes to the
    first maximal entry only.
    """
    x = const(x)
    v = x.value
    ax = axis % v.ndim
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != v.shape:
            raise ShapeError(f"max_over_axis: mask {mask.shape} vs x {v.shape}")
        vv = np.where(mask, v, -np.inf)
        any_valid = mask.any(axis=ax)
    else:
        vv = v
        any_valid = None
    if not (_GRAD_ENABLED and x.requires_grad):
        # constant input (e.g. operator features): no argmax bookkeeping needed
        out = vv.max(axis=ax)
        if any_valid is not None:
            out = np.where(any_valid, out, 0)
        return Var(out.astype(v.dtype, copy=False))
    arg = np.argmax(vv, axis=ax)
    out = np.take_along_axis(v, np.expand_dims(arg, ax), axis=ax).squeeze(ax)
    if any_valid is not None:
        out = np.where(any_valid, out, 0).astype(v.dtype)

    def bw(g):
        gx = np.zeros_like(v)
        gg = g if any_valid is None else g * any_valid
        np.put_along_axis(gx, np.expand_dims(arg, ax), np.expand_dims(gg, ax), axis=ax)
        return (gx,)

    return _node(out, (x,), bw, "max_over_axis")


MASK_LOGIT = -1e9


def masked_softmax(logits, mask, axis: int = -1) -> Var:
    """Softmax over ``axis`` with masked-out entries given exactly zero weight."""
    x = const(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs logits {x.shape}")
    ax = axis % x.value.ndim
    if not mask.any(axis=ax).all():
        raise ValueError("no valid views")
    z = np.where(mask, x.value, MASK_LOGIT)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z) * mask
    y = (e / e.sum(axis=ax, keepdims=True)).astype(x.value.dtype)

    def bw(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _node(y, (x,), bw, "masked_softmax")


def weighted_sum(w, xs) -> Var:
    """sum_i w[..., i] * xs[..., i, :]  with w (..., N) and xs (..., N, C)."""
    w, xs = const(w), const(xs)
    if xs.value.ndim != w.value.ndim + 1 or xs.shape[:-1] != w.shape:
        raise ShapeError(f"weighted_sum: w {w.shape} vs xs {xs.shape}")
    wv, xv = w.value, xs.value
    out = np.einsum("...n,...nc->...c", wv, xv)

    def bw(g):
        gw = np.einsum("...c,...nc->...n", g, xv) if w.requires_grad else None
        gx = wv[..., None] * g[..., None, :] if xs.requires_grad else None
        return gw, gx

    return _node(out, (w, xs), bw, "weighted_sum")


# --------------------------------------------------------------------------
# backward


def _topo(root: Var):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    if loss.value.size != 1 or loss.value.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones((), dtype=loss.value.dtype)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp


# --------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named trainable arrays with gradient and Adam moment slots."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name):
        return self.values[name]

    def names(self):
        return list(self.values)

    def leaves(self) -> dict[str, Var]:
        return {k: Var(v, requires_grad=True, name=k) for k, v in self.values.items()}

    def accumulate(self, leaves: dict[str, Var]) -> None:
        for k, leaf in leaves.items():
            if leaf.grad is not None:
                self.grads[k] += leaf.grad.astype(self.dtype, copy=False)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k in self.values:
            out.add(k, self.values[k])
            out.adam_m[k][...] = self.adam_m[k]
            out.adam_v[k][...] = self.adam_v[k]
        out.step_count = self.step_count
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


def adam_step(store: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, w in store.values.items():
        g = store.grads[k]
        m = store.adam_m[k]
        v = store.adam_v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)


def save_checkpoint(store: ParamStore, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for i, (k, v) in enumerate(sorted(store.values.items())):
        stem = f"{i:03d}"
        write_tensor(path / f"{stem}.value.lt3d", v.reshape(v.shape or (1,)))
        write_tensor(path / f"{stem}.adam_m.lt3d", store.adam_m[k].reshape(v.shape or (1,)))
        write_tensor(path / f"{stem}.adam_v.lt3d", store.adam_v[k].reshape(v.shape or (1,)))
        entries[k] = {"shape": list(v.shape), "file": stem}
    doc = {"dtype": store.dtype.name, "step_count": store.step_count, "entries": entries, "meta": meta or {}}
    (path / "params.json").write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    doc = json.loads((path / "params.json").read_text(encoding="utf-8"))
    store = ParamStore(doc["dtype"])
    for k, e in doc["entries"].items():
        shape = tuple(e["shape"])
        store.add(k, read_tensor(path / f"{e['file']}.value.lt3d").reshape(shape))
        store.adam_m[k][...] = read_tensor(path / f"{e['file']}.adam_m.lt3d").reshape(shape)
        store.adam_v[k][...] = read_tensor(path / f"{e['file']}.adam_v.lt3d").reshape(shape)
    store.step_count = int(doc["step_count"])
    return store, doc.get("meta", {})


# --------------------------------------------------------------------------
# verification


def grad_check(fn, store: ParamStore, eps=1e-4, names=None, max_per_param=None, seed=0,
               refine_tol=1e-7, return_details=False):
    """Compare backward() against central differences.

    ``fn(leaves) -> scalar Var`` rebuilds the graph from the given leaves and
    must be deterministic. Entries whose plain central difference at ``eps``
    misses by more than ``refine_tol`` are re-measured on a ladder of steps
    from 256*eps down to eps/16. If the one-sided slopes stay apart as the
    step shrinks, the function has a kink at that point (e.g. relu at 0) and
    the entry is skipped. Otherwise the reference is taken where neighbouring
    steps agree best after allowing for roundoff, which avoids both the roundoff of small steps and
    kinks that a large step straddles.
    Returns the max over checked entries of |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
    """
    if store.dtype != np.float64:
        raise ValueError("grad_check needs a float64 ParamStore")
    names = store.names() if names is None else list(names)
    leaves = store.leaves()
    loss = fn(leaves)
    backward(loss)
    f0 = float(loss.value)
    rs = np.random.default_rng(seed)
    worst, details, skipped = 0.0, {}, 0

    def rel(ga, gn):
        return abs(ga - gn) / max(1e-8, abs(ga) + abs(gn))

    for k in names:
        w = store.values[k]
        ga_all = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(w)
        flat = np.arange(w.size)
        if max_per_param is not None and w.size > max_per_param:
            flat = rs.choice(w.size, max_per_param, replace=False)
        worst_k = 0.0
        for j in flat:
            idx = np.unravel_index(j, w.shape)
            orig = float(w[idx])

            def at(x):
                w[idx] = x
                try:
                    return float(fn(store.leaves()).value)
                finally:
                    w[idx] = orig

            def sides(h):
                fp, fm = at(orig + h), at(orig - h)
                return (fp - f0) / h, (f0 - fm) / h, (fp - fm) / (2 * h)

            ga = float(ga_all[idx])
            dp, dm, gn = sides(eps)
            err = rel(ga, gn)
            if err > refine_tol:
                hs = eps * 4.0 ** np.arange(4, -3, -1)
                est = {h: sides(h) for h in hs if h != eps}
                est[eps] = (dp, dm, gn)
                tiny = hs[-1]
                noise = 32 * np.finfo(float).eps * max(abs(f0), 1e-300) / tiny
                gap, gap_tiny = abs(dp - dm), abs(est[tiny][0] - est[tiny][1])
                if gap_tiny > 4 * noise and gap_tiny > 0.25 * gap:
                    skipped += 1  # one-sided slopes do not converge: kink at this point
                    continue
                cs = [est[h][2] for h in hs]
                # disagreement between neighbours plus the roundoff floor of the smaller step
                fl = 8 * np.finfo(float).eps * max(abs(f0), 1e-300)
                i = min(range(len(cs) - 1), key=lambda i: abs(cs[i] - cs[i + 1]) + fl / hs[i + 1])
                gn = 0.5 * (cs[i] + cs[i + 1])
                err = rel(ga, gn)
            worst_k = max(worst_k, err)
        details[k] = worst_k
        worst = max(worst, worst_k)
    if return_details:
        return worst, details, skipped
    return worst
