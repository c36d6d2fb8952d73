"""Tape-based reverse-mode autodiff over dense float64 tensors.

All primitives operate on NCHW (or lower-rank) numpy arrays. A Tensor is an
immutable value; gradients are computed by replaying a Tape of recorded
primitive applications in reverse. One Tape belongs to one thread.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ArgumentError(ValueError):
    """Raised for invalid non-shape arguments (sizes, scalars, modes)."""


class Tensor:
    """Dense float64 array, optionally recorded on a tape.

    node_id is None for constants that do not participate in gradients.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node_id={self.node_id})"


class Tape:
    """Ordered record of primitive applications for reverse-mode autodiff."""

    def __init__(self):
        self._records = []  # (out_node_id, input_node_ids, backward_fn)
        self._leaves = {}   # node_id -> shape
        self._next_id = 0

    def _fresh(self):
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, data) -> Tensor:
        t = Tensor(data, self, self._fresh())
        self._leaves[t.node_id] = t.shape
        return t

    def _record(self, out_data, inputs, backward_fn) -> Tensor:
        out = Tensor(out_data, self, self._fresh())
        ids = [t.node_id if (t.tape is self) else None for t in inputs]
        self._records.append((out.node_id, ids, backward_fn))
        return out


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ArgumentError("inputs recorded on different tapes")
            tape = t.tape
    return tape


def _apply(inputs, out_data, backward_fn):
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out_data)
    return tape._record(out_data, inputs, backward_fn)


def backward(tape: Tape, loss: Tensor):
    """Reverse-mode gradients of a scalar loss w.r.t. every tape leaf.

    Leaves unreachable from the loss get zero gradients of matching shape.
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ArgumentError("loss is not recorded on this tape")
    if loss.shape != ():
        raise ArgumentError(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.node_id: np.ones(())}
    for out_id, in_ids, bwd in reversed(tape._records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for iid, gi in zip(in_ids, bwd(g)):
            if iid is None or gi is None:
                continue
            if iid in grads:
                grads[iid] = grads[iid] + gi
            else:
                grads[iid] = gi
    return {
        nid: Tensor(grads[nid]) if nid in grads else Tensor(np.zeros(shape))
        for nid, shape in tape._leaves.items()
    }


# ---------------------------------------------------------------------------
# elementwise / structural primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ: {a.shape} vs {b.shape}")
    return _apply([a, b], a.data + b.data, lambda g: [g, g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _apply([a, b], ad * bd, lambda g: [g * bd, g * ad])


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _apply([a], a.data * c, lambda g: [g * c])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _apply([a], np.asarray(a.data.sum()),
                  lambda g: [np.broadcast_to(g, shape).copy()])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0
    return _apply([a], np.where(mask, a.data, 0.0), lambda g: [g * mask])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _apply([a], a.data.reshape(shape), lambda g: [g.reshape(old)])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply([a], np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: [g.transpose(inv)])


def concat(inputs, axis: int) -> Tensor:
    if not inputs:
        raise ArgumentError("concat: empty input list")
    ref = inputs[0].shape
    for t in inputs:
        if len(t.shape) != len(ref) or any(
                i != axis and t.shape[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(
                f"concat: incompatible shapes {[t.shape for t in inputs]} "
                f"along axis {axis}")
    sizes = [t.shape[axis] for t in inputs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return np.split(g, splits, axis=axis)

    return _apply(list(inputs), np.concatenate([t.data for t in inputs], axis=axis), bwd)


def concat_channels(inputs) -> Tensor:
    """Channel-axis concatenation of NCHW tensors in argument order."""
    for t in inputs:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels: expected NCHW, got {t.shape}")
    return concat(inputs, axis=1)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    n_rows, n_cols = a.shape

    def bwd(g):
        gx = np.zeros((n_rows, n_cols))
        np.add.at(gx, idx, g)
        return [gx]

    return _apply([a], a.data[idx], bwd)


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise Huber-style loss: x^2/2 below 1, |x| - 1/2 above."""
    x = a.data
    absx = np.abs(x)
    out = np.where(absx < 1.0, 0.5 * x * x, absx - 0.5)
    return _apply([a], out, lambda g: [g * np.clip(x, -1.0, 1.0)])


def softmax(a: Tensor) -> Tensor:
    """Last-axis softmax, max-subtracted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return [s * (g - (g * s).sum(axis=-1, keepdims=True))]

    return _apply([a], s, bwd)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    ls = z - lse
    s = np.exp(ls)

    def bwd(g):
        return [g - s * g.sum(axis=-1, keepdims=True)]

    return _apply([a], ls, bwd)


# ---------------------------------------------------------------------------
# convolution

def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    hp = (h + 2 * padding - kh) // stride + 1
    wp = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, hp, wp),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    # (N*H'*W', C*kh*kw)
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * hp * wp, c * kh * kw), hp, wp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with per-output-channel bias (NCHW / KCkhkw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match weight {weight.shape}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k},)")
    if stride < 1:
        raise ArgumentError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ArgumentError(f"conv2d: padding must be nonnegative, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")

    cols, hp, wp = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(k, c * kh * kw)
    out = cols @ wmat.T + bias.data
    out = out.reshape(n, hp, wp, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * hp * wp, k)
        gw = (g2.T @ cols).reshape(k, c, kh, kw)
        gb = g2.sum(axis=0)
        gcols = g2 @ wmat  # (N*H'*W', C*kh*kw)
        gcols = gcols.reshape(n, hp, wp, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * hp:stride,
                   j:j + stride * wp:stride] += gcols[:, :, i, j]
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        return [gx, gw, gb]

    return _apply([x, weight, bias], out, bwd)


# ---------------------------------------------------------------------------
# bilinear upsampling

def _interp_matrix(out_n, in_n):
    """Row-stochastic matrix mapping in_n samples to out_n, half-pixel centers."""
    src = (np.arange(out_n) + 0.5) * in_n / out_n - 0.5
    src = np.clip(src, 0.0, in_n - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, in_n - 1)
    frac = src - i0
    m = np.zeros((out_n, in_n))
    rows = np.arange(out_n)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation to (out_h, out_w), half-pixel-center mapping."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"bilinear_upsample: invalid target {out_h}x{out_w}")
    if out_h < h or out_w < w:
        raise ArgumentError(
            f"bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}")
    my = _interp_matrix(out_h, h)   # (out_h, h)
    mx = _interp_matrix(out_w, w)   # (out_w, w)

    flat = x.data.reshape(n * c, h, w)
    out = (my @ flat) @ mx.T        # (n*c, out_h, out_w)
    out = np.ascontiguousarray(out.reshape(n, c, out_h, out_w))

    def bwd(g):
        gflat = g.reshape(n * c, out_h, out_w)
        gx = (my.T @ gflat) @ mx
        return [gx.reshape(n, c, h, w)]

    return _apply([x], out, bwd)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(builder, leaves, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    builder maps a list of leaf Tensors to a scalar loss Tensor and must be
    deterministic. Relative error uses max(1, |analytic|, |numeric|) as the
    denominator.
    """
    if eps <= 0:
        raise ArgumentError(f"grad_check: eps must be positive, got {eps}")
    arrays = [np.array(t.data, dtype=np.float64) for t in leaves]

    tape = Tape()
    bound = [tape.leaf(a) for a in arrays]
    loss = builder(bound)
    grads = backward(tape, loss)
    analytic = [grads[t.node_id].data for t in bound]

    def eval_loss(arrs):
        return builder([Tensor(a) for a in arrs]).item()

    worst = 0.0
    for li, base in enumerate(arrays):
        flat = base.reshape(-1)
        aflat = analytic[li].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_loss(arrays)
            flat[i] = orig - eps
            f_minus = eval_loss(arrays)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
