"""Minimal reverse-mode autodiff over dense float32 tensors.

Feature maps are 4-D arrays in (batch, channel, height, width) order;
convolution biases are 1-D. The op set is exactly what the denoising
network needs: dilated/masked conv2d, elementwise add/mul, leaky
activation, channel concat/slice, and full reductions. Convolution inner
loops accumulate in float64 and store float32 results, which keeps
finite-difference gradient checks tight without doubling tensor memory.
"""

import itertools

import numpy as np

from .errors import DimensionError, ParameterError


class Tensor:
    """A node on the autodiff tape.

    `data` is the cached forward value, `grad` (filled in by `backward`)
    accumulates the partial derivative of the root with respect to this
    node. Tensors are treated as immutable once written; reusing one in
    several ops fans the gradient in additively.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ParameterError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"


def _result(data32, parents, backward, op):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data32, requires_grad=requires,
                  parents=[p for p in parents if p.requires_grad] if requires else (),
                  backward=backward if requires else None, op=op)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float32)
    if g.shape != t.data.shape:
        raise DimensionError(f"gradient shape {g.shape} != value shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def blind_spot_mask(kh, kw):
    """Kernel mask with every tap active except the center one.

    Requires odd kernel extents so the center tap is well defined.
    """
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"blind-spot mask needs odd kernel size, got {kh}x{kw}")
    mask = np.ones((kh, kw), dtype=bool)
    mask[kh // 2, kw // 2] = False
    return mask


def _im2col(xp, kh, kw, dilation, out_h, out_w):
    # xp: zero-padded float64 input (N, C, Hp, Wp) -> (N, kh*kw*C, out_h*out_w)
    n, c = xp.shape[:2]
    cols = np.empty((n, kh * kw * c, out_h * out_w), dtype=np.float64)
    for t, (i, j) in enumerate(itertools.product(range(kh), range(kw))):
        patch = xp[:, :, i * dilation:i * dilation + out_h, j * dilation:j * dilation + out_w]
        cols[:, t * c:(t + 1) * c, :] = patch.reshape(n, c, out_h * out_w)
    return cols


def conv2d(x, kernel, bias, dilation=1, mask=None):
    """Same-padded 2-D convolution with optional dilation and kernel mask.

    out[n,co,y,x] = bias[co] + sum over active taps (i,j) and channels ci of
    kernel[co,ci,i,j] * input[n,ci, y+dilation*(i-(kh-1)/2), x+dilation*(j-(kw-1)/2)],
    with out-of-bounds reads taken as zero. Masked taps contribute zero in
    the forward pass and receive zero kernel gradient.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D, got shape {x.data.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D, got shape {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if cin_k != cin:
        raise DimensionError(f"kernel expects {cin_k} input channels, input has {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {kh}x{kw}")
    if bias.data.shape != (cout,):
        raise DimensionError(f"bias shape {bias.data.shape} != ({cout},)")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ParameterError(f"dilation must be a positive integer, got {dilation!r}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (kh, kw) or mask.dtype != bool:
            raise DimensionError(f"mask must be bool of shape ({kh}, {kw}), got "
                                 f"{mask.dtype} {mask.shape}")

    dilation = int(dilation)
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    keff = kernel.data * mask if mask is not None else kernel.data

    def pad64(arr):
        return np.pad(arr.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    # kmat rows are tap-major then channel: [(i*kw+j)*cin + ci, co]
    kmat = keff.astype(np.float64).transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    cols = _im2col(pad64(x.data), kh, kw, dilation, h, w)
    out64 = np.matmul(kmat.T[None, :, :], cols)
    out64 += bias.data.astype(np.float64).reshape(1, cout, 1)
    out32 = out64.reshape(n, cout, h, w).astype(np.float32)
    del cols, out64  # recomputed on demand in backward

    def backward(g):
        g64 = g.astype(np.float64).reshape(n, cout, h * w)
        if kernel.requires_grad or x.requires_grad:
            cols_b = _im2col(pad64(x.data), kh, kw, dilation, h, w)
        if kernel.requires_grad:
            dk = np.tensordot(g64, cols_b, axes=([0, 2], [0, 2]))
            dk = dk.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            if mask is not None:
                dk = dk * mask
            _accumulate(kernel, dk)
        if bias.requires_grad:
            _accumulate(bias, g64.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(kmat[None, :, :], g64)
            gxp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw), dtype=np.float64)
            for t, (i, j) in enumerate(itertools.product(range(kh), range(kw))):
                block = dcols[:, t * cin:(t + 1) * cin, :].reshape(n, cin, h, w)
                gxp[:, :, i * dilation:i * dilation + h, j * dilation:j * dilation + w] += block
            _accumulate(x, gxp[:, :, ph:ph + h, pw:pw + w])

    return _result(out32, (x, kernel, bias), backward, "conv2d")


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shapes differ: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward, "add")


def mul(a, b):
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def leaky_activation(a, slope=0.1):
    """Piecewise-linear rectifier: x for x > 0, slope*x otherwise."""
    pos = a.data > 0

    def backward(g):
        _accumulate(a, np.where(pos, g, np.float32(slope) * g))

    out = np.where(pos, a.data, np.float32(slope) * a.data)
    return _result(out, (a,), backward, "leaky")


def concat_channels(tensors):
    """Stack tensors along the channel axis; batch and spatial sizes must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ParameterError("concat_channels needs at least one tensor")
    ref = tensors[0].data.shape
    for t in tensors:
        s = t.data.shape
        if len(s) != 4 or (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise DimensionError(f"concat_channels shape mismatch: {s} vs {ref}")
    widths = [t.data.shape[1] for t in tensors]
    edges = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, edges[:-1], edges[1:]):
            _accumulate(t, g[:, lo:hi])

    out = np.concatenate([t.data for t in tensors], axis=1)
    return _result(out, tensors, backward, "concat")


def slice_channels(a, start, count):
    """Contiguous channel slice [start, start+count)."""
    c = a.data.shape[1]
    if start < 0 or count < 1 or start + count > c:
        raise DimensionError(f"channel slice [{start}:{start + count}) out of range for C={c}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:start + count] = g
        _accumulate(a, full)

    return _result(a.data[:, start:start + count].copy(), (a,), backward, "slice")


def sum_all(a):
    """Sum of every element, as a scalar tensor."""
    def backward(g):
        _accumulate(a, np.full_like(a.data, np.float32(g.reshape(()))))

    s = np.sum(a.data, dtype=np.float64)
    return _result(np.float32(s), (a,), backward, "sum")


def mean_all(a):
    """Mean of every element, as a scalar tensor."""
    n = a.data.size

    def backward(g):
        _accumulate(a, np.full_like(a.data, np.float32(g.reshape(()) / n)))

    m = np.sum(a.data, dtype=np.float64) / n
    return _result(np.float32(m), (a,), backward, "mean")


def backward(root):
    """Propagate gradients from a scalar root to every reachable leaf.

    Visits nodes in reverse topological order exactly once; gradients of
    shared subexpressions accumulate additively.
    """
    if root.data.size != 1:
        raise ParameterError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
