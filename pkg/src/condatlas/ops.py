"""Differentiable operators with exact analytic backward passes.

A tiny reverse-mode engine on float64 numpy arrays: each operator builds a
Node holding the forward value plus vector-Jacobian closures for the parents
that need gradients. Graphs are per-evaluation DAGs; backward() consumes the
graph once and returns gradients keyed by leaf name.

Tensors follow the package grid convention: 4-d arrays are
(channels, nx, ny, nz), vector fields are (3, nx, ny, nz) in voxel units.
Heavy convolution buffers are recycled through a small arena to avoid
allocator churn (single-threaded use only).
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes or channel counts do not match the operator contract."""


class GraphError(RuntimeError):
    """Backward called on a consumed or non-scalar graph."""


# ---------------------------------------------------------------------------
# Buffer arena: free-lists of large scratch arrays keyed by shape.
# ---------------------------------------------------------------------------

class _Arena:
    def __init__(self):
        self._free = {}

    def take(self, shape):
        lst = self._free.get(shape)
        if lst:
            return lst.pop()
        return np.empty(shape)

    def give(self, arr):
        self._free.setdefault(arr.shape, []).append(arr)

    def clear(self):
        self._free.clear()


_ARENA = _Arena()


# ---------------------------------------------------------------------------
# Graph node and backward traversal
# ---------------------------------------------------------------------------

class Node:
    """One value in the op graph; edges carry vjp closures to parents."""

    __slots__ = ("data", "name", "needs_grad", "grad", "_edges", "_consumed")

    def __init__(self, data, edges=(), name=None, needs_grad=None):
        self.data = data
        self.name = name
        self._edges = tuple(e for e in edges if e[1] is not None)
        if needs_grad is None:
            needs_grad = bool(self._edges)
        self.needs_grad = needs_grad
        self.grad = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape


def leaf(data, name=None, needs_grad=False):
    """Wrap an array (or python scalar) as a graph input."""
    return Node(np.asarray(data, dtype=np.float64), name=name, needs_grad=needs_grad)


def _toposort(root):
    topo, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def backward(root, seed=1.0):
    """Reverse-mode accumulation from a scalar root; returns {leaf name: grad}.

    The graph is consumed: a second backward over any of its nodes raises
    GraphError until a fresh forward pass rebuilds it.
    """
    if root.data.size != 1:
        raise GraphError(f"backward seed must be scalar, got shape {root.data.shape}")
    if root._consumed:
        raise GraphError("graph already consumed; rerun the forward pass before backward")
    topo = _toposort(root)
    for node in topo:
        if node._consumed:
            raise GraphError("graph shares consumed nodes; rerun the forward pass")
        node._consumed = True
    root.grad = np.full(root.data.shape, float(seed))
    grads = {}
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        if node._edges:
            for parent, vjp in node._edges:
                pg = vjp(g)
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad += pg
            node.grad = None  # free intermediates early
        elif node.name is not None:
            if node.name in grads:
                grads[node.name] = grads[node.name] + g
            else:
                grads[node.name] = g
    return grads


def _unary(x, out, vjp):
    return Node(out, edges=((x, vjp if x.needs_grad else None),))


# ---------------------------------------------------------------------------
# Elementwise arithmetic (same-shape operands, or a python-number constant)
# ---------------------------------------------------------------------------

def _as_operand(v):
    if isinstance(v, Node):
        return v
    return leaf(np.asarray(v, dtype=np.float64))


def _binary_check(a, b):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"operand shapes {a.data.shape} and {b.data.shape} do not broadcast")


def _reduce_like(g, ref):
    # collapse a broadcast gradient back to a scalar operand; always return an
    # owned buffer (accumulation mutates it in place)
    if ref.data.size == 1 and g.shape != ref.data.shape:
        return np.asarray(g.sum()).reshape(ref.data.shape)
    return g.copy()


def add(a, b):
    a, b = _as_operand(a), _as_operand(b)
    _binary_check(a, b)
    out = a.data + b.data
    return Node(out, edges=(
        (a, (lambda g: _reduce_like(g, a)) if a.needs_grad else None),
        (b, (lambda g: _reduce_like(g, b)) if b.needs_grad else None),
    ))


def sub(a, b):
    a, b = _as_operand(a), _as_operand(b)
    _binary_check(a, b)
    out = a.data - b.data
    return Node(out, edges=(
        (a, (lambda g: _reduce_like(g, a)) if a.needs_grad else None),
        (b, (lambda g: _reduce_like(-g, b)) if b.needs_grad else None),
    ))


def mul(a, b):
    a, b = _as_operand(a), _as_operand(b)
    _binary_check(a, b)
    out = a.data * b.data
    return Node(out, edges=(
        (a, (lambda g: _reduce_like(g * b.data, a)) if a.needs_grad else None),
        (b, (lambda g: _reduce_like(g * a.data, b)) if b.needs_grad else None),
    ))


def div(a, b):
    a, b = _as_operand(a), _as_operand(b)
    _binary_check(a, b)
    out = a.data / b.data
    return Node(out, edges=(
        (a, (lambda g: _reduce_like(g / b.data, a)) if a.needs_grad else None),
        (b, (lambda g: _reduce_like(-g * a.data / (b.data * b.data), b)) if b.needs_grad else None),
    ))


def neg(x):
    return _unary(x, -x.data, lambda g: -g)


def square(x):
    return _unary(x, x.data * x.data, lambda g: 2.0 * x.data * g)


def sum_all(x):
    return _unary(x, np.asarray(x.data.sum()), lambda g: np.full(x.data.shape, float(g)))


def mean_all(x):
    n = x.data.size
    return _unary(x, np.asarray(x.data.mean()), lambda g: np.full(x.data.shape, float(g) / n))


def vdot(a, b):
    """Inner product of two same-shape tensors."""
    _binary_check(a, b)
    if a.data.shape != b.data.shape:
        raise ShapeError("vdot requires equal shapes")
    out = np.asarray(np.vdot(a.data, b.data))
    return Node(out, edges=(
        (a, (lambda g: float(g) * b.data) if a.needs_grad else None),
        (b, (lambda g: float(g) * a.data) if b.needs_grad else None),
    ))


def matvec(w, x, b=None):
    """Dense layer w @ x (+ b) for 1-d activations."""
    if w.data.ndim != 2 or x.data.ndim != 1 or w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"matvec shapes {w.data.shape} @ {x.data.shape}")
    out = w.data @ x.data
    if b is not None:
        if b.data.shape != out.shape:
            raise ShapeError("bias length mismatch")
        out = out + b.data
    edges = [
        (w, (lambda g: np.outer(g, x.data)) if w.needs_grad else None),
        (x, (lambda g: w.data.T @ g) if x.needs_grad else None),
    ]
    if b is not None:
        edges.append((b, (lambda g: g.copy()) if b.needs_grad else None))
    return Node(out, edges=edges)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(x):
    mask = x.data > 0  # subgradient 0 at the kink
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: np.where(mask, g, 0.0))


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    return _unary(x, out, lambda g: np.where(mask, g, slope * g))


def sigmoid(x):
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    return _unary(x, s, lambda g: g * s * (1.0 - s))


def softplus(x):
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 1.0 / (1.0 + np.exp(-np.abs(d)))
    sig = np.where(d >= 0, sig, 1.0 - sig)
    return _unary(x, out, lambda g: g * sig)


def softmax_channels(x):
    """Softmax over axis 0 (the channel axis), per voxel."""
    d = x.data
    m = d.max(axis=0, keepdims=True)
    e = np.exp(d - m)
    s = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=0, keepdims=True)
        return s * (g - dot)

    return _unary(x, s, vjp)


# ---------------------------------------------------------------------------
# FiLM conditioning
# ---------------------------------------------------------------------------

def film(f, gamma, beta):
    """Per-channel affine modulation: out[c] = gamma[c] * f[c] + beta[c]."""
    c = f.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"film expects gamma/beta of length {c}, got {gamma.data.shape}/{beta.data.shape}"
        )
    gcol = gamma.data.reshape((c,) + (1,) * (f.data.ndim - 1))
    bcol = beta.data.reshape((c,) + (1,) * (f.data.ndim - 1))
    out = gcol * f.data + bcol
    spatial = tuple(range(1, f.data.ndim))
    return Node(out, edges=(
        (f, (lambda g: g * gcol) if f.needs_grad else None),
        (gamma, (lambda g: (g * f.data).sum(axis=spatial)) if gamma.needs_grad else None),
        (beta, (lambda g: g.sum(axis=spatial)) if beta.needs_grad else None),
    ))


# ---------------------------------------------------------------------------
# Convolution (cross-correlation, "same" zero padding, stride 1 or 2)
# ---------------------------------------------------------------------------

def conv3(x, w, b, stride=1):
    """3-D convolution: x (Cin, X, Y, Z), w (k, k, k, Cin, Cout), b (Cout,)."""
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError("conv3 expects a 4-d input and 5-d kernel")
    k = w.data.shape[0]
    if w.data.shape[1] != k or w.data.shape[2] != k or k % 2 != 1:
        raise ShapeError(f"kernel must be cubic with odd size, got {w.data.shape[:3]}")
    cin, cout = w.data.shape[3], w.data.shape[4]
    if x.data.shape[0] != cin:
        raise ShapeError(f"conv3 channel mismatch: input {x.data.shape[0]}, kernel {cin}")
    if b.data.shape != (cout,):
        raise ShapeError(f"bias shape {b.data.shape} != ({cout},)")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")

    pad = (k - 1) // 2
    sx, sy, sz = x.data.shape[1:]
    ox, oy, oz = (-(-d // stride) for d in (sx, sy, sz))
    n_out = ox * oy * oz
    pshape = (cin, sx + 2 * pad, sy + 2 * pad, sz + 2 * pad)

    xp = _ARENA.take(pshape)
    xp.fill(0.0)
    xp[:, pad : pad + sx, pad : pad + sy, pad : pad + sz] = x.data

    cols = _ARENA.take((k * k * k, cin, n_out))
    o = 0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                np.copyto(
                    cols[o].reshape(cin, ox, oy, oz),
                    xp[:, i : i + stride * ox : stride, j : j + stride * oy : stride,
                       l : l + stride * oz : stride],
                )
                o += 1
    _ARENA.give(xp)

    wmat = w.data.reshape(k * k * k * cin, cout)
    out = (wmat.T @ cols.reshape(-1, n_out)).reshape(cout, ox, oy, oz)
    out += b.data[:, None, None, None]

    need_any = x.needs_grad or w.needs_grad or b.needs_grad
    if not need_any:
        _ARENA.give(cols)
        return Node(out)

    state = {"cols": cols, "released": not (x.needs_grad or w.needs_grad)}
    if state["released"]:
        _ARENA.give(cols)

    def release():
        if not state["released"]:
            _ARENA.give(state["cols"])
            state["released"] = True

    def vjp_w(g):
        gmat = g.reshape(cout, n_out)
        gw = (state["cols"].reshape(-1, n_out) @ gmat.T).reshape(w.data.shape)
        if not x.needs_grad:
            release()
        return gw

    def vjp_x(g):
        gmat = g.reshape(cout, n_out)
        gcols = _ARENA.take((k * k * k * cin, n_out))
        np.matmul(wmat, gmat, out=gcols)
        gview = gcols.reshape(k * k * k, cin, ox, oy, oz)
        gxp = _ARENA.take(pshape)
        gxp.fill(0.0)
        o = 0
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    gxp[:, i : i + stride * ox : stride, j : j + stride * oy : stride,
                        l : l + stride * oz : stride] += gview[o]
                    o += 1
        gx = gxp[:, pad : pad + sx, pad : pad + sy, pad : pad + sz].copy()
        _ARENA.give(gxp)
        _ARENA.give(gcols)
        release()
        return gx

    return Node(out, edges=(
        (x, vjp_x if x.needs_grad else None),
        (w, vjp_w if w.needs_grad else None),
        (b, (lambda g: g.sum(axis=(1, 2, 3))) if b.needs_grad else None),
    ))


# ---------------------------------------------------------------------------
# Resampling: trilinear upsample x2, stride-2 average pooling, warping
# ---------------------------------------------------------------------------

_UP_MATS = {}


def _upsample_matrix(n):
    """(2n, n) trilinear x2 interpolation matrix, align-corners-false, edge clamp."""
    m = _UP_MATS.get(n)
    if m is None:
        m = np.zeros((2 * n, n))
        for o in range(2 * n):
            src = (o + 0.5) / 2.0 - 0.5
            f = int(np.floor(src))
            wgt = src - f
            m[o, min(max(f, 0), n - 1)] += 1.0 - wgt
            m[o, min(max(f + 1, 0), n - 1)] += wgt
        _UP_MATS[n] = m
    return m


def _apply_axis(mat, arr, axis):
    moved = np.moveaxis(arr, axis, 0)
    out = mat @ moved.reshape(moved.shape[0], -1)
    return np.moveaxis(out.reshape((mat.shape[0],) + moved.shape[1:]), 0, axis)


def upsample2(x):
    """Trilinear x2 upsampling of (C, X, Y, Z); backward is the exact adjoint."""
    if x.data.ndim != 4:
        raise ShapeError("upsample2 expects a 4-d tensor")
    mats = [_upsample_matrix(n) for n in x.data.shape[1:]]
    out = x.data
    for axis, mat in enumerate(mats, start=1):
        out = _apply_axis(mat, out, axis)

    def vjp(g):
        for axis, mat in enumerate(mats, start=1):
            g = _apply_axis(mat.T, g, axis)
        return g

    return _unary(x, out, vjp)


def avg_pool2(x):
    """Non-overlapping 2x2x2 mean pooling; spatial dims must be even."""
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2 expects a 4-d tensor")
    c, sx, sy, sz = x.data.shape
    if sx % 2 or sy % 2 or sz % 2:
        raise ShapeError(f"avg_pool2 needs even dims, got {(sx, sy, sz)}")
    out = np.zeros((c, sx // 2, sy // 2, sz // 2))
    for i in range(2):
        for j in range(2):
            for l in range(2):
                out += x.data[:, i::2, j::2, l::2]
    out *= 0.125

    def vjp(g):
        gx = np.empty_like(x.data)
        gg = g * 0.125
        for i in range(2):
            for j in range(2):
                for l in range(2):
                    gx[:, i::2, j::2, l::2] = gg
        return gx

    return _unary(x, out, vjp)


def global_sum_pool(x):
    """Per-channel sum over all voxels: (C, X, Y, Z) -> (C,)."""
    if x.data.ndim != 4:
        raise ShapeError("global_sum_pool expects a 4-d tensor")
    out = x.data.sum(axis=(1, 2, 3))
    return _unary(
        x, out, lambda g: np.broadcast_to(g[:, None, None, None], x.data.shape).copy()
    )


_GRIDS = {}


def _base_grid(dims):
    grid = _GRIDS.get(dims)
    if grid is None:
        axes = np.indices(dims, dtype=np.float64)
        grid = axes.reshape(3, -1)
        _GRIDS[dims] = grid
    return grid


def warp(img, u):
    """Sample img at x + u(x) with trilinear interpolation and border clamping.

    img: (C, X, Y, Z) node; u: (3, X, Y, Z) displacement in voxel units.
    Gradients w.r.t. both the image and the displacement.
    """
    if img.data.ndim != 4 or u.data.ndim != 4 or u.data.shape[0] != 3:
        raise ShapeError("warp expects img (C,X,Y,Z) and u (3,X,Y,Z)")
    dims = img.data.shape[1:]
    if u.data.shape[1:] != dims:
        raise ShapeError(f"warp dim mismatch: img {dims}, u {u.data.shape[1:]}")
    c = img.data.shape[0]
    n = int(np.prod(dims))
    pos = _base_grid(dims) + u.data.reshape(3, n)

    lo = []
    hi = []
    wgt = []
    interior = []
    for d in range(3):
        nd = dims[d]
        pc = np.clip(pos[d], 0.0, nd - 1.0)
        f = np.floor(pc)
        lo.append(f.astype(np.intp))
        hi.append(np.minimum(lo[d] + 1, nd - 1))
        wgt.append(pc - f)
        interior.append((pos[d] > 0.0) & (pos[d] < nd - 1.0))

    ny, nz = dims[1], dims[2]
    flat = img.data.reshape(c, n)
    corners = {}
    weights = {}
    out = np.zeros((c, n))
    for a in range(2):
        wx = wgt[0] if a else 1.0 - wgt[0]
        ix = hi[0] if a else lo[0]
        for bb in range(2):
            wy = wgt[1] if bb else 1.0 - wgt[1]
            iy = hi[1] if bb else lo[1]
            for cc in range(2):
                wz = wgt[2] if cc else 1.0 - wgt[2]
                iz = hi[2] if cc else lo[2]
                idx = (ix * ny + iy) * nz + iz
                vals = flat[:, idx]
                wcorner = wx * wy * wz
                out += wcorner * vals
                corners[(a, bb, cc)] = (idx, vals)
                weights[(a, bb, cc)] = (wx, wy, wz)
    out = out.reshape(img.data.shape)

    def vjp_img(g):
        gf = g.reshape(c, n)
        gimg = np.zeros((c, n))
        for key, (idx, _) in corners.items():
            wx, wy, wz = weights[key]
            wg = wx * wy * wz
            for ch in range(c):
                gimg[ch] += np.bincount(idx, weights=wg * gf[ch], minlength=n)
        return gimg.reshape(img.data.shape)

    def vjp_u(g):
        gf = g.reshape(c, n)
        gu = np.zeros((3, n))
        for key, (_, vals) in corners.items():
            a, bb, cc = key
            wx, wy, wz = weights[key]
            contrib = (gf * vals).sum(axis=0)
            gu[0] += (1.0 if a else -1.0) * wy * wz * contrib
            gu[1] += (1.0 if bb else -1.0) * wx * wz * contrib
            gu[2] += (1.0 if cc else -1.0) * wx * wy * contrib
        for d in range(3):
            gu[d] *= interior[d]
        return gu.reshape(u.data.shape)

    return Node(out, edges=(
        (img, vjp_img if img.needs_grad else None),
        (u, vjp_u if u.needs_grad else None),
    ))


def warp_vec(f, u):
    """Warp a 3-component vector field through displacement u (component-wise)."""
    if f.data.ndim != 4 or f.data.shape[0] != 3:
        raise ShapeError("warp_vec expects a (3,X,Y,Z) field")
    return warp(f, u)


def integrate_ss(v, steps=7):
    """Scaling-and-squaring integration of a stationary velocity field.

    Returns the displacement u with Phi(x) = x + u(x); differentiable through
    every squaring step. Pass the negated field for the inverse map.
    """
    if steps < 1:
        raise ShapeError(f"integration steps must be >= 1, got {steps}")
    u = mul(v, 1.0 / float(1 << steps))
    for _ in range(steps):
        u = add(u, warp_vec(u, u))
    return u


# ---------------------------------------------------------------------------
# Window sums and finite differences (loss building blocks)
# ---------------------------------------------------------------------------

def _box_axis(arr, axis, r):
    n = arr.shape[axis]
    cs = np.cumsum(arr, axis=axis)
    idx_hi = np.minimum(np.arange(n) + r, n - 1)
    hi = np.take(cs, idx_hi, axis=axis)
    idx_lo = np.arange(n) - r - 1
    lo = np.take(cs, np.maximum(idx_lo, 0), axis=axis)
    mask_shape = [1] * arr.ndim
    mask_shape[axis] = n
    lo = lo * (idx_lo >= 0).reshape(mask_shape)
    return hi - lo


def _box_sum_data(arr, window):
    r = (window - 1) // 2
    out = arr
    for axis in range(arr.ndim - 3, arr.ndim):
        out = _box_axis(out, axis, r)
    return out


def box_sum(x, window):
    """Sum over a window^3 neighborhood with zero padding (self-adjoint)."""
    if window % 2 != 1 or window < 1:
        raise ShapeError(f"window must be odd and positive, got {window}")
    if min(x.data.shape[-3:]) < window:
        raise ShapeError(f"window {window} exceeds dims {x.data.shape[-3:]}")
    out = _box_sum_data(x.data, window)
    return _unary(x, out, lambda g: _box_sum_data(g, window))


def forward_diff(x, axis):
    """One-sided forward difference along a spatial axis; output is one shorter."""
    if axis < 1 or axis >= x.data.ndim:
        raise ShapeError(f"forward_diff axis {axis} out of range")
    sl_hi = [slice(None)] * x.data.ndim
    sl_lo = [slice(None)] * x.data.ndim
    sl_hi[axis] = slice(1, None)
    sl_lo[axis] = slice(None, -1)
    sl_hi, sl_lo = tuple(sl_hi), tuple(sl_lo)
    out = x.data[sl_hi] - x.data[sl_lo]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sl_hi] += g
        gx[sl_lo] -= g
        return gx

    return _unary(x, out, vjp)


def concat_channels(a, b):
    """Concatenate two 4-d tensors along the channel axis."""
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(f"concat spatial mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return Node(out, edges=(
        (a, (lambda g: g[:ca].copy()) if a.needs_grad else None),
        (b, (lambda g: g[ca:].copy()) if b.needs_grad else None),
    ))
