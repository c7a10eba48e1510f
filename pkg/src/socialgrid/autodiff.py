"""Tape-based reverse-mode autodiff over dense float64 numpy arrays.

Primitives cover exactly what the agent architecture needs: linear layers,
2-D convolution / transposed convolution (padding 0), an LSTM cell composed
from elementwise ops, activations, softmax/log-softmax, reductions, and a few
indexing ops. Forward runs are plain numpy; when a Tape is active and an
input is on the differentiation path, each primitive appends a backward
closure to the tape. ``reverse_pass`` replays the tape in reverse.

Convolutions are lowered to BLAS matmuls with im2col/col2im so that batched
training steps run at memory bandwidth rather than Python speed.
"""

import numpy as np

__all__ = [
    "Tensor", "Tape", "Adam", "parameter", "constant",
    "add", "sub", "mul", "neg", "exp", "absolute", "tanh", "sigmoid",
    "leaky_relu", "softmax", "log_softmax", "tsum", "tmean", "minimum",
    "maximum", "clip", "reshape", "narrow", "concat", "gather_last",
    "linear_forward", "conv2d_forward", "deconv2d_forward", "lstm_step",
    "reverse_pass", "zero_grads", "finite_difference_check",
]

LEAKY_SLOPE = 0.01

# When set to a list, nonsmooth primitives (leaky_relu, absolute, minimum,
# maximum) append their branch decisions here. finite_difference_check uses
# this to skip coordinates whose probe crosses a kink, where central
# differences do not estimate the derivative.
_BRANCH_TRACE = None


def _trace_branch(mask):
    if _BRANCH_TRACE is not None:
        _BRANCH_TRACE.append(np.asarray(mask).ravel().copy())


class Tensor:
    """A dense float64 array plus a gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "track", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.track = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # Operator sugar; constants are lifted automatically.
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


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def constant(data):
    return Tensor(data)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Records are appended in execution order, which is a topological order of
    the computation graph; the reverse pass walks them back to front. Use as
    a context manager; ops run outside any tape do no bookkeeping at all.
    """

    _active = None

    def __init__(self):
        self.records = []  # (out_tensor, backward_fn)

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("a Tape is already active")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def gradients(self, loss, params):
        """Run the reverse pass and return grads for params (zeros if unused)."""
        reverse_pass(self, loss)
        return [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in params]


def _record(out, backward):
    tape = Tape._active
    out.track = True
    tape.records.append((out, backward))


def _tracked(*tensors):
    return Tape._active is not None and any(t.track for t in tensors)


def _accum(t, g):
    if not t.track:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad += g


def reverse_pass(tape, loss):
    """Backpropagate from a scalar loss through every recorded primitive.

    Parameters never touched by the loss keep grad None; Tape.gradients maps
    those to zero arrays.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, backward in reversed(tape.records):
        if out.grad is not None:
            backward(out.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data)
    if _tracked(a, b):
        def backward(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        _record(out, backward)
    return out


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data)
    if _tracked(a, b):
        def backward(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))
        _record(out, backward)
    return out


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data)
    if _tracked(a, b):
        ad, bd = a.data, b.data
        def backward(g):
            _accum(a, _unbroadcast(g * bd, ad.shape))
            _accum(b, _unbroadcast(g * ad, bd.shape))
        _record(out, backward)
    return out


def neg(a):
    a = _lift(a)
    out = Tensor(-a.data)
    if _tracked(a):
        def backward(g):
            _accum(a, -g)
        _record(out, backward)
    return out


def exp(a):
    a = _lift(a)
    out = Tensor(np.exp(a.data))
    if _tracked(a):
        od = out.data
        def backward(g):
            _accum(a, g * od)
        _record(out, backward)
    return out


def absolute(a):
    a = _lift(a)
    out = Tensor(np.abs(a.data))
    _trace_branch(a.data >= 0)
    if _tracked(a):
        s = np.sign(a.data)
        def backward(g):
            _accum(a, g * s)
        _record(out, backward)
    return out


def tanh(a):
    a = _lift(a)
    out = Tensor(np.tanh(a.data))
    if _tracked(a):
        od = out.data
        def backward(g):
            _accum(a, g * (1.0 - od * od))
        _record(out, backward)
    return out


def sigmoid(a):
    a = _lift(a)
    # expit via tanh keeps both tails stable
    out = Tensor(0.5 * (np.tanh(0.5 * a.data) + 1.0))
    if _tracked(a):
        od = out.data
        def backward(g):
            _accum(a, g * od * (1.0 - od))
        _record(out, backward)
    return out


def leaky_relu(a, slope=LEAKY_SLOPE):
    a = _lift(a)
    mask = a.data >= 0
    _trace_branch(mask)
    out = Tensor(np.where(mask, a.data, slope * a.data))
    if _tracked(a):
        def backward(g):
            _accum(a, np.where(mask, g, slope * g))
        _record(out, backward)
    return out


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _lift(a), _lift(b)
    take_a = a.data <= b.data
    _trace_branch(take_a)
    out = Tensor(np.where(take_a, a.data, b.data))
    if _tracked(a, b):
        def backward(g):
            _accum(a, _unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
            _accum(b, _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))
        _record(out, backward)
    return out


def maximum(a, b):
    a, b = _lift(a), _lift(b)
    take_a = a.data >= b.data
    _trace_branch(take_a)
    out = Tensor(np.where(take_a, a.data, b.data))
    if _tracked(a, b):
        def backward(g):
            _accum(a, _unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
            _accum(b, _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))
        _record(out, backward)
    return out


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


# ---------------------------------------------------------------------------
# reductions / shape

def tsum(a, axis=None):
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis))
    if _tracked(a):
        shape = a.data.shape
        def backward(g):
            if axis is None:
                _accum(a, np.broadcast_to(g, shape).copy())
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), shape).copy())
        _record(out, backward)
    return out


def tmean(a, axis=None):
    a = _lift(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    a = _lift(a)
    out = Tensor(a.data.reshape(shape))
    if _tracked(a):
        orig = a.data.shape
        def backward(g):
            _accum(a, g.reshape(orig))
        _record(out, backward)
    return out


def narrow(a, axis, start, size):
    """Contiguous slice [start, start+size) along one axis."""
    a = _lift(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out = Tensor(a.data[idx])
    if _tracked(a):
        shape = a.data.shape
        def backward(g):
            full = np.zeros(shape)
            full[idx] = g
            _accum(a, full)
        _record(out, backward)
    return out


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _tracked(*tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def backward(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                _accum(t, piece)
        _record(out, backward)
    return out


def gather_last(a, indices):
    """Pick one element along the last axis per leading position."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError(f"index shape {idx.shape} != leading shape {a.data.shape[:-1]}")
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])
    if _tracked(a):
        shape = a.data.shape
        def backward(g):
            full = np.zeros(shape)
            np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
            _accum(a, full)
        _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# softmax family (last axis)

def log_softmax(a):
    a = _lift(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(ls)
    if _tracked(a):
        p = np.exp(ls)
        def backward(g):
            _accum(a, g - p * g.sum(axis=-1, keepdims=True))
        _record(out, backward)
    return out


def softmax(a):
    a = _lift(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)
    if _tracked(a):
        def backward(g):
            _accum(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))
        _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# linear / conv / deconv / lstm

def linear_forward(x, W, b):
    """y = x W^T + b with W of shape (out, in); x may be (in,) or (B, in)."""
    x, W, b = _lift(x), _lift(W), _lift(b)
    if W.data.ndim != 2 or x.data.shape[-1] != W.data.shape[1] or b.data.shape != (W.data.shape[0],):
        raise ValueError(
            f"linear shape mismatch: x{x.data.shape} W{W.data.shape} b{b.data.shape}")
    out = Tensor(x.data @ W.data.T + b.data)
    if _tracked(x, W, b):
        xd, Wd = x.data, W.data
        def backward(g):
            _accum(x, g @ Wd)
            if xd.ndim == 1:
                _accum(W, np.outer(g, xd))
                _accum(b, g)
            else:
                g2 = g.reshape(-1, g.shape[-1])
                _accum(W, g2.T @ xd.reshape(-1, xd.shape[-1]))
                _accum(b, g2.sum(axis=0))
        _record(out, backward)
    return out


def _im2col(x, kh, kw, stride):
    """Patches of x (B,C,H,W) laid out (C*kh*kw, B*Ho*Wo).

    Folding the batch into the GEMM column dimension turns the whole batched
    convolution into one large matrix product instead of B skinny ones.
    """
    B, C, H, W = x.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (C, kh, kw, B, Ho, Wo), (s1, s2, s3, s0, s2 * stride, s3 * stride))
    return np.ascontiguousarray(view).reshape(C * kh * kw, B * Ho * Wo), Ho, Wo


def _col2im(cols, out_shape, kh, kw, stride, hi, wi):
    """Scatter-add (C*kh*kw, B*hi*wi) columns into a (B, C, Ho, Wo) grid."""
    B, C, Ho, Wo = out_shape
    g = np.zeros((C, B, Ho, Wo))
    cols = cols.reshape(C, kh, kw, B, hi, wi)
    for i in range(kh):
        for j in range(kw):
            g[:, :, i:i + hi * stride:stride, j:j + wi * stride:stride] += cols[:, i, j]
    return np.ascontiguousarray(g.transpose(1, 0, 2, 3))


def _to_channel_major(a):
    """(B, C, H, W) -> (C, B*H*W) contiguous."""
    B, C, H, W = a.shape
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(C, B * H * W)


def _check_conv_geometry(H, W, kh, kw, stride, padding):
    if padding != 0:
        raise ValueError("only padding=0 is supported")
    if (H - kh) < 0 or (W - kw) < 0 or stride < 1:
        raise ValueError(f"invalid conv geometry: input {H}x{W}, kernel {kh}x{kw}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv output would be empty: input {H}x{W}, kernel {kh}x{kw}")
    return Ho, Wo


def conv2d_forward(x, kernels, bias, stride, padding=0):
    """Cross-correlation with kernels (C_out, C_in, kh, kw); x (B,C,H,W) or (C,H,W)."""
    x, kernels, bias = _lift(x), _lift(kernels), _lift(bias)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = kernels.data.shape
    if Ci != C:
        raise ValueError(f"conv channel mismatch: input {C}, kernels expect {Ci}")
    Ho, Wo = _check_conv_geometry(H, W, kh, kw, stride, padding)
    cols, _, _ = _im2col(xd, kh, kw, stride)
    W2 = kernels.data.reshape(Co, Ci * kh * kw)
    y2 = W2 @ cols                                   # (Co, B*Ho*Wo)
    y = np.ascontiguousarray(y2.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3))
    y += bias.data[None, :, None, None]
    out = Tensor(y[0] if squeeze else y)
    if _tracked(x, kernels, bias):
        def backward(g):
            gb = g[None] if squeeze else g
            g2 = _to_channel_major(gb)               # (Co, B*Ho*Wo)
            _accum(kernels, (g2 @ cols.T).reshape(Co, Ci, kh, kw))
            _accum(bias, g2.sum(axis=1))
            if x.track:
                gcols = W2.T @ g2
                gx = _col2im(gcols, (B, C, H, W), kh, kw, stride, Ho, Wo)
                _accum(x, gx[0] if squeeze else gx)
        _record(out, backward)
    return out


def deconv2d_forward(x, kernels, bias, stride, padding=0):
    """Transposed convolution, kernels (C_in, C_out, kh, kw); output (H-1)*stride + kh.

    With kernels tied to a matching conv2d this is its exact adjoint on the
    input argument.
    """
    x, kernels, bias = _lift(x), _lift(kernels), _lift(bias)
    if padding != 0:
        raise ValueError("only padding=0 is supported")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    B, C, H, W = xd.shape
    Ci, Co, kh, kw = kernels.data.shape
    if Ci != C:
        raise ValueError(f"deconv channel mismatch: input {C}, kernels expect {Ci}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    Ho = (H - 1) * stride + kh
    Wo = (W - 1) * stride + kw
    W2 = kernels.data.reshape(Ci, Co * kh * kw)
    x2 = _to_channel_major(xd)                       # (Ci, B*H*W)
    cols = W2.T @ x2                                 # (Co*kh*kw, B*H*W)
    y = _col2im(cols, (B, Co, Ho, Wo), kh, kw, stride, H, W)
    y += bias.data[None, :, None, None]
    out = Tensor(y[0] if squeeze else y)
    if _tracked(x, kernels, bias):
        def backward(g):
            gb = g[None] if squeeze else g
            gcols, _, _ = _im2col(gb, kh, kw, stride)
            _accum(bias, gb.sum(axis=(0, 2, 3)))
            _accum(kernels, (x2 @ gcols.T).reshape(Ci, Co, kh, kw))
            if x.track:
                gx2 = W2 @ gcols                     # (Ci, B*H*W)
                gx = np.ascontiguousarray(
                    gx2.reshape(C, B, H, W).transpose(1, 0, 2, 3))
                _accum(x, gx[0] if squeeze else gx)
        _record(out, backward)
    return out


def lstm_step(x, h, c, W_ih, W_hh, b_ih, b_hh):
    """One LSTM cell step; gate order (input, forget, cell, output).

    x (B, in) or (in,), h/c (B, H) or (H,). Returns (h', c').
    """
    x, h, c = _lift(x), _lift(h), _lift(c)
    H = h.data.shape[-1]
    if W_ih.data.shape != (4 * H, x.data.shape[-1]) or W_hh.data.shape != (4 * H, H):
        raise ValueError(
            f"lstm shape mismatch: x{x.data.shape} h{h.data.shape} "
            f"W_ih{W_ih.data.shape} W_hh{W_hh.data.shape}")
    gates = add(linear_forward(x, W_ih, b_ih), linear_forward(h, W_hh, b_hh))
    axis = gates.data.ndim - 1
    i = sigmoid(narrow(gates, axis, 0, H))
    f = sigmoid(narrow(gates, axis, H, H))
    g = tanh(narrow(gates, axis, 2 * H, H))
    o = sigmoid(narrow(gates, axis, 3 * H, H))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over a list of parameter Tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {p.name}")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        """Flat view of mutable state, for snapshot/restore and checkpoints."""
        return self.m + self.v

    def snapshot(self):
        return ([m.copy() for m in self.m], [v.copy() for v in self.v], self.t)

    def restore(self, snap):
        ms, vs, t = snap
        self.m = [m.copy() for m in ms]
        self.v = [v.copy() for v in vs]
        self.t = t


def adam_step(params, grads, opt):
    """Apply one Adam update given externally computed grads."""
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    zero_grads(params)


# ---------------------------------------------------------------------------
# finite differences

def _rel_err(a, b, floor=1e-3):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _eval_with_branches(f):
    global _BRANCH_TRACE
    _BRANCH_TRACE = []
    try:
        val = float(f().data)
        trace = (np.concatenate(_BRANCH_TRACE) if _BRANCH_TRACE
                 else np.zeros(0, dtype=bool))
    finally:
        _BRANCH_TRACE = None
    return val, trace


def finite_difference_check(f, params, step=1e-4, max_coords=200, rng=None,
                            gauss_directions=0, skip_kinks=False,
                            return_stats=False):
    """Max relative error between reverse-mode grads of f() and central differences.

    f is a deterministic closure over params returning a scalar Tensor. Large
    tensors are probed on a random subset of coordinates (or along random
    Gaussian directions if gauss_directions > 0).

    With skip_kinks=True, coordinates whose +-step probe flips a branch of a
    nonsmooth primitive (leaky ReLU, abs, min/max) are excluded: across such
    a kink central differences do not estimate the derivative, so comparing
    there tests nothing.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    grads = tape.gradients(loss, params)
    zero_grads(params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    checked = skipped = 0

    def probe(apply_delta, ad_directional):
        nonlocal worst, checked, skipped
        apply_delta(+step)
        if skip_kinks:
            up, tr_up = _eval_with_branches(f)
        else:
            up = float(f().data)
        apply_delta(-2 * step)
        if skip_kinks:
            down, tr_down = _eval_with_branches(f)
        else:
            down = float(f().data)
        apply_delta(+step)
        if skip_kinks and not np.array_equal(tr_up, tr_down):
            skipped += 1
            return
        checked += 1
        fd = (up - down) / (2 * step)
        worst = max(worst, float(_rel_err(ad_directional, fd)))

    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        if gauss_directions > 0 and flat.size > max_coords:
            for _ in range(gauss_directions):
                v = rng.standard_normal(flat.size)
                v /= np.linalg.norm(v)
                probe(lambda d, v=v: flat.__iadd__(d * v), float(gflat @ v))
            continue
        if flat.size > max_coords:
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            idxs = np.arange(flat.size)
        for i in idxs:
            def bump(d, i=i):
                flat[i] += d
            probe(bump, gflat[i])
    if return_stats:
        return worst, {"checked": checked, "skipped": skipped}
    return worst
