"""Minimal reverse-mode autodiff over dense numpy buffers.

Forward ops record their inputs and a backward closure on the implicit tape
(the parent graph); Tensor.backward() replays it once in reverse topological
order. Double precision throughout. Broadcasting is restricted to
scalar-with-tensor and equal shapes.
"""

import numpy as np

from .geometry import hat, so3_exp


class DiffopsError(ValueError):
    pass


class Tensor:
    """Dense value buffer with a paired gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data)

    def backward(self):
        if self.data.ndim != 0 and self.data.size != 1:
            raise DiffopsError("backward() requires a scalar output")
        if self._backward_done:
            raise DiffopsError("backward() already replayed on this tape")
        order = _topo_order(self)
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
        self._backward_done = True


def _topo_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out.grad = np.zeros_like(out.data)
    return out


def _accum(t, g):
    if t.requires_grad:
        t.grad += g


def _check_broadcast(a, b):
    if a.data.shape == b.data.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise DiffopsError(f"incompatible shapes {a.data.shape} vs {b.data.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g))  # scalar operand


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, _reduce_to(g, b.data.shape))
    return _make(a.data + b.data, [a, b], bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bwd(g):
        _accum(a, _reduce_to(g, a.data.shape))
        _accum(b, -_reduce_to(g, b.data.shape))
    return _make(a.data - b.data, [a, b], bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bwd(g):
        _accum(a, _reduce_to(g * b.data, a.data.shape))
        _accum(b, _reduce_to(g * a.data, b.data.shape))
    return _make(a.data * b.data, [a, b], bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b)

    def bwd(g):
        _accum(a, _reduce_to(g / b.data, a.data.shape))
        _accum(b, _reduce_to(-g * a.data / (b.data ** 2), b.data.shape))
    return _make(a.data / b.data, [a, b], bwd)


def neg(a):
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, -g)
    return _make(-a.data, [a], bwd)


def abs_(a):
    a = _as_tensor(a)
    sign = np.sign(a.data)  # subgradient at 0 is 0

    def bwd(g):
        _accum(a, g * sign)
    return _make(np.abs(a.data), [a], bwd)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)
    return _make(out_data, [a], bwd)


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data ** 2))
    return _make(out_data, [a], bwd)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g):
        _accum(a, g * mask)
    return _make(np.maximum(a.data, 0.0), [a], bwd)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))
    return _make(out_data, [a], bwd)


def sum_(a):
    a = _as_tensor(a)

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g)))
    return _make(np.sum(a.data), [a], bwd)


def mean(a):
    a = _as_tensor(a)
    n = a.data.size

    def bwd(g):
        _accum(a, np.full_like(a.data, float(g) / n))
    return _make(np.mean(a.data), [a], bwd)


def min2(a, b):
    """Pixelwise minimum of two equal-shape maps; ties route to `a`."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DiffopsError(f"min2 shapes differ: {a.data.shape} vs {b.data.shape}")
    take_a = a.data <= b.data

    def bwd(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)
    return _make(np.minimum(a.data, b.data), [a, b], bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))
    return _make(a.data.reshape(shape), [a], bwd)


def take(a, index):
    """Static slice; backward scatter-adds into the source shape."""
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[index] = g
            a.grad += buf
    return _make(a.data[index], [a], bwd)


def concat(tensors, axis=1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.grad += g[tuple(idx)]
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bwd)


def pad2d(a, width):
    """Zero-pad the two trailing spatial axes of a (B, C, H, W) tensor."""
    a = _as_tensor(a)
    p = int(width)
    pads = [(0, 0)] * (a.data.ndim - 2) + [(p, p), (p, p)]

    def bwd(g):
        _accum(a, g[..., p:-p, p:-p] if p else g)
    return _make(np.pad(a.data, pads), [a], bwd)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DiffopsError(
            f"conv2d expects 4D input/kernel, got {x.data.shape} and {kernel.data.shape}")
    B, C, H, W = x.data.shape
    O, Ck, kh, kw = kernel.data.shape
    if Ck != C:
        raise DiffopsError(f"conv2d channel mismatch: input C={C}, kernel C={Ck}")
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise DiffopsError(f"conv2d output would be empty for input {x.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((B, O, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
            out += np.einsum("bchw,oc->bohw", xs, kernel.data[:, :, i, j])
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    parents = [x, kernel] + ([bias] if bias is not None else [])

    def bwd(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, :, i:i + s * Ho:s, j:j + s * Wo:s]
                if kernel.requires_grad:
                    kernel.grad[:, :, i, j] += np.einsum("bohw,bchw->oc", g, xs)
                if gxp is not None:
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += np.einsum(
                        "bohw,oc->bchw", g, kernel.data[:, :, i, j])
        if gxp is not None:
            x.grad += gxp[:, :, p:p + H, p:p + W] if p else gxp
        if bias is not None and bias.requires_grad:
            bias.grad += np.sum(g, axis=(0, 2, 3))
    return _make(out, parents, bwd)


def affine(x, weight, bias):
    """x (B, F) @ weight (F, O) + bias (O,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.shape[1] != weight.data.shape[0]:
        raise DiffopsError(
            f"affine shapes: x {x.data.shape} vs weight {weight.data.shape}")

    def bwd(g):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(bias, np.sum(g, axis=0))
    return _make(x.data @ weight.data + bias.data, [x, weight, bias], bwd)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    x = _as_tensor(x)
    B, C, H, W = x.data.shape

    def bwd(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.data.shape).copy())
    return _make(np.mean(x.data, axis=(2, 3)), [x], bwd)


def sample_grid(x, coords):
    """Bilinear sampling of (B, C, H, W) at coords (B, 2, Hc, Wc) = (x, y).

    Returns (output, valid) where out-of-bounds samples produce zero value,
    zero gradient, and valid=False. Gradients flow to both the image and the
    sampling coordinates.
    """
    x, coords = _as_tensor(x), _as_tensor(coords)
    if coords.data.ndim != 4 or coords.data.shape[1] != 2:
        raise DiffopsError(f"coords must be (B, 2, H, W), got {coords.data.shape}")
    B, C, H, W = x.data.shape
    cx = coords.data[:, 0]
    cy = coords.data[:, 1]
    valid = (cx >= 0) & (cx <= W - 1) & (cy >= 0) & (cy <= H - 1)
    xs = np.where(valid, cx, 0.0)
    ys = np.where(valid, cy, 0.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = xs - x0
    ay = ys - y0
    bidx = np.arange(B)[:, None, None]
    w00 = (1 - ax) * (1 - ay)
    w01 = ax * (1 - ay)
    w10 = (1 - ax) * ay
    w11 = ax * ay
    v00 = x.data[bidx, :, y0, x0].transpose(0, 3, 1, 2)
    v01 = x.data[bidx, :, y0, x1].transpose(0, 3, 1, 2)
    v10 = x.data[bidx, :, y1, x0].transpose(0, 3, 1, 2)
    v11 = x.data[bidx, :, y1, x1].transpose(0, 3, 1, 2)
    vmask = valid[:, None]
    out = (v00 * w00[:, None] + v01 * w01[:, None]
           + v10 * w10[:, None] + v11 * w11[:, None]) * vmask

    def bwd(g):
        g = g * vmask
        if x.requires_grad:
            gt = g.transpose(0, 2, 3, 1)  # (B, Hc, Wc, C)
            np.add.at(x.grad, (bidx, slice(None), y0, x0), gt * w00[..., None])
            np.add.at(x.grad, (bidx, slice(None), y0, x1), gt * w01[..., None])
            np.add.at(x.grad, (bidx, slice(None), y1, x0), gt * w10[..., None])
            np.add.at(x.grad, (bidx, slice(None), y1, x1), gt * w11[..., None])
        if coords.requires_grad:
            dx = ((v01 - v00) * (1 - ay)[:, None] + (v11 - v10) * ay[:, None])
            dy = ((v10 - v00) * (1 - ax)[:, None] + (v11 - v01) * ax[:, None])
            gx = np.sum(g * dx, axis=1) * valid
            gy = np.sum(g * dy, axis=1) * valid
            coords.grad += np.stack([gx, gy], axis=1)
    return _make(out, [x, coords], bwd), valid


def _rotation_derivatives(rotvec, R):
    """dR/dw_k for axis-angle w, via the Gallego-Yezzi closed form."""
    w = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(w)
    derivs = []
    if theta < 1e-8:
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            derivs.append(hat(e))
        return derivs
    W = hat(w)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        derivs.append((w[k] * W + hat(np.cross(w, (np.eye(3) - R) @ e))) / theta**2 @ R)
    return derivs


def reproject_coords(rotvec, trans, depth, K, eps=1e-6):
    """Warp every pixel of an (H, W) depth map through a rigid transform.

    rotvec/trans are (3,) tensors (axis-angle + translation of the
    source-to-target transform), depth is an (H, W) tensor. Returns a
    (2, H, W) coordinate tensor in the target image plus a validity mask
    (behind-camera pixels flagged, coords pushed far out of bounds).
    Gradients flow to rotvec, trans and depth analytically.
    """
    rotvec, trans, depth = _as_tensor(rotvec), _as_tensor(trans), _as_tensor(depth)
    H, W = depth.data.shape
    R = so3_exp(rotvec.data)
    u, v = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    hbar = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])  # (3,H,W)
    p = hbar * depth.data[None]
    q = np.einsum("ij,jhw->ihw", R, p) + trans.data[:, None, None]
    qz = q[2]
    valid = qz > eps
    qz_safe = np.where(valid, qz, 1.0)
    px = K.fx * q[0] / qz_safe + K.cx
    py = K.fy * q[1] / qz_safe + K.cy
    out = np.where(valid[None], np.stack([px, py]), -1e9)

    # Projection Jacobian rows: d(px)/dq and d(py)/dq, zeroed where invalid.
    m = valid.astype(float)
    a00 = K.fx / qz_safe * m
    a02 = -K.fx * q[0] / qz_safe**2 * m
    a11 = K.fy / qz_safe * m
    a12 = -K.fy * q[1] / qz_safe**2 * m
    dRk = _rotation_derivatives(rotvec.data, R)

    def bwd(g):
        gq = np.stack([g[0] * a00,
                       g[1] * a11,
                       g[0] * a02 + g[1] * a12])  # (3,H,W) = A^T g
        if trans.requires_grad:
            trans.grad += np.sum(gq, axis=(1, 2))
        if rotvec.requires_grad:
            for k in range(3):
                dq = np.einsum("ij,jhw->ihw", dRk[k], p)
                rotvec.grad[k] += np.sum(gq * dq)
        if depth.requires_grad:
            Rh = np.einsum("ij,jhw->ihw", R, hbar)
            depth.grad += np.sum(gq * Rh, axis=0)
    return _make(out, [rotvec, trans, depth], bwd), valid


class GradCheckReport:
    def __init__(self, max_rel_err, failures, tolerance):
        self.max_rel_err = max_rel_err
        self.failures = failures  # list of (input index, coordinate, analytic, numeric)
        self.tolerance = tolerance
        self.passed = max_rel_err <= tolerance

    def __repr__(self):
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
                f"passed={self.passed}, failures={len(self.failures)})")


def grad_check(fn, inputs, step=1e-4, tolerance=1e-4):
    """Compare analytic gradients of a scalar-valued fn against central FD.

    `fn` takes the list of Tensors and returns a scalar Tensor. Relative
    error is scaled by max(|analytic|, |numeric|, 1).
    """
    inputs = [_as_tensor(x) for x in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = fn(inputs)
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    max_rel = 0.0
    failures = []
    for idx, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + step
            fp = float(fn(inputs).data)
            flat[c] = orig - step
            fm = float(fn(inputs).data)
            flat[c] = orig
            numeric = (fp - fm) / (2 * step)
            a = analytic[idx].reshape(-1)[c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if rel > max_rel:
                max_rel = rel
            if rel > tolerance:
                failures.append((idx, c, a, numeric))
    return GradCheckReport(max_rel, failures, tolerance)
