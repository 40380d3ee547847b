"""Small dense-tensor engine with define-by-run reverse-mode differentiation.

Values are numpy arrays of shape ``(channels, rows, cols)`` (batch size is
always one), or 0-d arrays for scalar losses. Every differentiable operation
appends a record to a :class:`Tape`; :meth:`Tape.gradient` walks the records
backwards and accumulates adjoints.

Only the handful of operations needed by the U-Net and the finite-difference
losses are provided.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised when the tape is used inconsistently."""


DTYPES = {"single": np.float32, "double": np.float64}


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'") from None


class Tensor:
    """An immutable array value, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Optional["Tape"] = None, node: Optional[int] = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


@dataclass
class Kernel:
    """Convolution weights with their application rule.

    ``weights`` has shape ``(out_channels, in_channels, k_rows, k_cols)``.
    """

    weights: np.ndarray
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 4:
            raise DimensionError(f"kernel weights must be 4-d, got shape {self.weights.shape}")
        kr, kc = self.weights.shape[2:]
        if kr % 2 == 0 or kc % 2 == 0:
            raise DimensionError(f"kernel extent must be odd, got {kr}x{kc}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")

    @property
    def shape(self):
        return self.weights.shape

    def astype(self, dtype) -> "Kernel":
        return Kernel(self.weights.astype(dtype), self.stride, self.padding)


@dataclass
class _Record:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of operations for one forward pass.

    Node ids are indices into ``nodes``; inputs always precede outputs, so a
    reverse sweep is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Record] = []
        self.watched: list[Tensor] = []

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its tensor."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        t = self._push("leaf", (), None, data)
        self.watched.append(t)
        return t

    def clear(self) -> None:
        """Drop all records. Backward closures hold tensors that point back at
        the tape, so long loops should clear rather than wait for the cycle GC."""
        self.nodes.clear()
        self.watched.clear()

    def _push(self, op, inputs, backward, data) -> Tensor:
        self.nodes.append(_Record(op, tuple(inputs), backward))
        return Tensor(data, self, len(self.nodes) - 1)

    def record(self, op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
        """Append an op whose ``backward(upstream)`` returns one adjoint per input.

        Untracked inputs get ``None`` slots. If nothing is tracked the result is a
        plain constant and no record is kept.
        """
        ids = []
        for t in inputs:
            if t.tracked:
                if t.tape is not self:
                    raise TapeError(f"{op}: input belongs to a different tape")
                ids.append(t.node)
            else:
                ids.append(None)
        if all(i is None for i in ids):
            return Tensor(data)
        return self._push(op, ids, backward, data)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], upstream=None) -> list[np.ndarray]:
        """Adjoints of ``target`` with respect to each of ``sources``.

        ``upstream`` defaults to ones (i.e. d target / d target for a scalar).
        Sources that do not influence the target receive zeros.
        """
        if not target.tracked or target.tape is not self:
            raise TapeError("target is not recorded on this tape")
        for s in sources:
            if not s.tracked or s.tape is not self:
                raise TapeError("source is not recorded on this tape")
        if upstream is None:
            upstream = np.ones_like(target.data)
        upstream = np.asarray(upstream, dtype=target.dtype)
        if upstream.shape != target.shape:
            raise DimensionError(f"upstream shape {upstream.shape} != output shape {target.shape}")

        keep = {s.node for s in sources}
        grads: dict[int, np.ndarray] = {target.node: upstream}
        for idx in range(target.node, -1, -1):
            g = grads.get(idx)
            if g is None:
                continue
            rec = self.nodes[idx]
            if rec.backward is None:
                continue
            # leaves keep their accumulated adjoint; interior nodes release it
            if idx not in keep:
                del grads[idx]
            for parent, pg in zip(rec.inputs, rec.backward(g)):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        return [grads.get(s.node, np.zeros_like(s.data)) for s in sources]


def _tape_of(*tensors) -> Optional[Tape]:
    for t in tensors:
        if isinstance(t, Tensor) and t.tracked:
            return t.tape
    return None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, inputs, data, backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(op, inputs, data, backward)


# ---------------------------------------------------------------------------
# convolution

def _conv_geometry(shape, kshape, stride, padding):
    c, rows, cols = shape
    cout, cin, kr, kc = kshape
    if c != cin:
        raise DimensionError(f"conv2d: input shape {shape} has {c} channels, kernel shape {kshape} expects {cin}")
    if padding == "same":
        pr, pc = (kr - 1) // 2, (kc - 1) // 2
    else:
        pr = pc = 0
    if rows + 2 * pr < kr or cols + 2 * pc < kc:
        raise DimensionError(f"conv2d: input shape {shape} smaller than kernel shape {kshape}")
    orows = (rows + 2 * pr - kr) // stride + 1
    ocols = (cols + 2 * pc - kc) // stride + 1
    return pr, pc, orows, ocols


def _im2col(xp, kr, kc, stride, orows, ocols):
    win = sliding_window_view(xp, (kr, kc), axis=(1, 2))
    win = win[:, : (orows - 1) * stride + 1 : stride, : (ocols - 1) * stride + 1 : stride]
    # (C, oR, oC, kr, kc) -> (C, kr, kc, oR, oC) -> (C*kr*kc, oR*oC)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, orows * ocols)


# Stride-1 path. The padded input is stored channels-last and flattened, so a
# shift by (a, b) taps is a contiguous row slice at offset a*Wp + b. The kc
# column shifts are stacked once; each kernel row is then a single matmul.
# Outputs carry kc-1 junk columns per row that are dropped afterwards.

def _flat_cl(x, pr, pc, kc):
    c, rows, cols = x.shape
    hp, wp = rows + 2 * pr, cols + 2 * pc
    flat = np.zeros((hp * wp + kc, c), dtype=x.dtype)
    flat[: hp * wp].reshape(hp, wp, c)[pr : pr + rows, pc : pc + cols] = x.transpose(1, 2, 0)
    return flat, hp, wp


def _stack_cols(flat, n, kc):
    c = flat.shape[1]
    out = np.empty((n, kc, c), dtype=flat.dtype)
    for b in range(kc):
        out[:, b] = flat[b : b + n]
    return out.reshape(n, kc * c)


def _corr_s1(x, w, pr, pc):
    """Valid correlation of ``x`` zero-padded by ``(pr, pc)``. Returns the
    output, the stacked input (reused by the kernel gradient) and the padded width."""
    cout, cin, kr, kc = w.shape
    flat, hp, wp = _flat_cl(x, pr, pc, kc)
    orows, ocols = hp - kr + 1, wp - kc + 1
    stacked = _stack_cols(flat, hp * wp, kc)
    wa = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kr, kc * cin, cout)
    span = orows * wp
    acc = stacked[:span] @ wa[0]
    for a in range(1, kr):
        acc += stacked[a * wp : a * wp + span] @ wa[a]
    out = acc.reshape(orows, wp, cout)[:, :ocols].transpose(2, 0, 1)
    return np.ascontiguousarray(out), stacked, wp


def _corr_s1_backward(g, stacked, wp, w, pr, pc, need_x, need_w):
    cout, cin, kr, kc = w.shape
    orows, ocols = g.shape[1:]
    gw = gx = None
    if need_w:
        ge = np.zeros((orows, wp, cout), dtype=g.dtype)
        ge[:, :ocols] = g.transpose(1, 2, 0)
        ge = ge.reshape(-1, cout)
        span = orows * wp
        gwa = np.empty((kr, kc * cin, cout), dtype=g.dtype)
        for a in range(kr):
            gwa[a] = stacked[a * wp : a * wp + span].T @ ge
        gw = gwa.reshape(kr, kc, cin, cout).transpose(3, 2, 0, 1)
    if need_x:
        # adjoint of a padded valid correlation: full correlation with the
        # flipped, channel-transposed kernel
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _, _ = _corr_s1(g, wf, kr - 1 - pr, kc - 1 - pc)
    return gx, gw


def conv2d(x, kernel: Union[Kernel, "Tensor", np.ndarray], bias=None, stride: Optional[int] = None,
           padding: Optional[str] = None) -> Tensor:
    """Cross-correlation ``out[o,i,j] = sum_{c,p,q} w[o,c,p,q] x[c, s*i+p-pad, s*j+q-pad] + b[o]``.

    ``kernel`` is either a :class:`Kernel` (carrying its own stride/padding) or a
    4-d weight tensor, in which case ``stride`` defaults to 1 and ``padding``
    to ``'valid'``. ``'same'`` pads with zeros by half the kernel extent.
    """
    x = _as_tensor(x)
    if isinstance(kernel, Kernel):
        w = Tensor(kernel.weights.astype(x.dtype, copy=False))
        stride = kernel.stride if stride is None else stride
        padding = kernel.padding if padding is None else padding
    else:
        w = _as_tensor(kernel)
    stride = 1 if stride is None else stride
    padding = "valid" if padding is None else padding
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: expected (C,H,W) input and 4-d kernel, got {x.shape} and {w.shape}")
    cout, cin, kr, kc = w.shape
    pr, pc, orows, ocols = _conv_geometry(x.shape, w.shape, stride, padding)
    inputs = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        inputs.append(bias)
    need_x, need_w = x.tracked, w.tracked
    wdata = w.data

    if stride == 1:
        out, stacked, wp = _corr_s1(x.data, wdata, pr, pc)

        def grads_xw(g):
            return _corr_s1_backward(g, stacked, wp, wdata, pr, pc, need_x, need_w)
    else:
        xp = np.pad(x.data, ((0, 0), (pr, pr), (pc, pc))) if (pr or pc) else x.data
        cols = _im2col(xp, kr, kc, stride, orows, ocols)
        w2 = wdata.reshape(cout, -1)
        out = (w2 @ cols).reshape(cout, orows, ocols)
        x_shape, xp_shape = x.shape, xp.shape

        def grads_xw(g):
            g2 = g.reshape(cout, -1)
            gw = (g2 @ cols.T).reshape(wdata.shape) if need_w else None
            gx = None
            if need_x:
                gcols = (w2.T @ g2).reshape(cin, kr, kc, orows, ocols)
                gxp = np.zeros(xp_shape, dtype=g.dtype)
                rs = (orows - 1) * stride + 1
                cs = (ocols - 1) * stride + 1
                for p in range(kr):
                    for q in range(kc):
                        gxp[:, p : p + rs : stride, q : q + cs : stride] += gcols[:, p, q]
                gx = gxp[:, pr : pr + x_shape[1], pc : pc + x_shape[2]]
            return gx, gw

    if bias is not None:
        out += bias.data[:, None, None]

    def backward(g):
        grads = list(grads_xw(g))
        if len(inputs) == 3:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    return _emit("conv2d", inputs, out, backward)


def conv2d_backward(tape: Tape, node: int, upstream: np.ndarray) -> tuple:
    """Adjoints of a recorded ``conv2d`` node for a given upstream gradient.

    Returns ``(grad_input, grad_kernel[, grad_bias])``; entries are ``None`` for
    inputs that were constants.
    """
    if node is None or not 0 <= node < len(tape.nodes) or tape.nodes[node].op != "conv2d":
        raise TapeError(f"node {node} is not a conv2d record on this tape")
    return tuple(tape.nodes[node].backward(np.asarray(upstream)))


# ---------------------------------------------------------------------------
# resampling

def avg_pool2(x) -> Tensor:
    """Non-overlapping 2x2 mean; an odd trailing row/column is dropped."""
    x = _as_tensor(x)
    c, rows, cols = x.shape
    if rows < 2 or cols < 2:
        raise DimensionError(f"avg_pool2: input shape {x.shape} smaller than 2x2 window")
    r2, c2 = rows // 2, cols // 2
    out = x.data[:, : 2 * r2, : 2 * c2].reshape(c, r2, 2, c2, 2).mean(axis=(2, 4))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        q = np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2)
        gx[:, : 2 * r2, : 2 * c2] = q
        return (gx,)

    return _emit("avg_pool2", [x], out, backward)


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def bilinear_upsample(x, rows: int, cols: int) -> Tensor:
    """Align-corners bilinear resize to exactly ``rows x cols``."""
    x = _as_tensor(x)
    _, r, c = x.shape
    if rows < r or cols < c:
        raise DimensionError(f"bilinear_upsample: target {(rows, cols)} smaller than input {(r, c)}")
    my = interpolation_matrix(r, rows, x.dtype)
    mx = interpolation_matrix(c, cols, x.dtype)
    out = my @ x.data @ mx.T

    def backward(g):
        return (my.T @ g @ mx,)

    return _emit("bilinear_upsample", [x], out, backward)


bilinear_upsample2 = bilinear_upsample


def concat_channels(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1:] != b.shape[1:]:
        raise DimensionError(f"concat_channels: spatial shapes differ, {a.shape} vs {b.shape}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        return g[:ca], g[ca:]

    return _emit("concat", [a, b], out, backward)


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data[start:stop]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[start:stop] = g
        return (gx,)

    return _emit("slice", [x], out, backward)


# ---------------------------------------------------------------------------
# pointwise

ACTIVATIONS = ("identity", "relu", "tanh", "swish")


def activation(x, kind: str = "identity") -> Tensor:
    x = _as_tensor(x)
    if kind == "identity":
        return x
    d = x.data
    if kind == "relu":
        out = np.maximum(d, 0)
        back = lambda g: (g * (d > 0),)
    elif kind == "tanh":
        out = np.tanh(d)
        back = lambda g: (g * (1 - out * out),)
    elif kind == "swish":
        sig = expit(d)
        out = d * sig
        back = lambda g: (g * (sig * (1 + d * (1 - sig))),)
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return _emit(kind, [x], out.astype(d.dtype, copy=False), back)


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def hadamard(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("hadamard", a, b)
    da, db = a.data, b.data
    return _emit("hadamard", [a, b], da * db, lambda g: (g * db, g * da))


def scale_add(a, b, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """``alpha * a + beta * b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("scale_add", a, b)
    dt = np.result_type(a.dtype, b.dtype)
    alpha, beta = dt.type(alpha), dt.type(beta)
    out = alpha * a.data + beta * b.data
    return _emit("scale_add", [a, b], out, lambda g: (alpha * g, beta * g))


def scale(a, alpha: float) -> Tensor:
    a = _as_tensor(a)
    alpha = a.dtype.type(alpha)
    return _emit("scale", [a], alpha * a.data, lambda g: (alpha * g,))


def sum_squares(a, mask=None) -> Tensor:
    """Sum of squared entries, optionally restricted to a spatial boolean mask.

    ``mask`` broadcasts over channels when it is 2-d.
    """
    a = _as_tensor(a)
    d = a.data
    if mask is None:
        out = np.sum(d * d)
        return _emit("sum_squares", [a], np.asarray(out), lambda g: (2 * g * d,))
    m = np.asarray(mask, dtype=bool)
    if m.shape != d.shape and m.shape != d.shape[-2:]:
        raise DimensionError(f"sum_squares: mask shape {m.shape} incompatible with {d.shape}")
    m = np.broadcast_to(m, d.shape)
    dm = np.where(m, d, 0)
    out = np.sum(dm * dm)
    return _emit("sum_squares", [a], np.asarray(out), lambda g: (2 * g * dm,))


def dilate(u) -> Tensor:
    """Embed an ``(C, n, m)`` field at the even positions of a ``(C, 2n-1, 2m-1)`` lattice."""
    u = _as_tensor(u)
    c, n, m = u.shape
    out = np.zeros((c, 2 * n - 1, 2 * m - 1), dtype=u.dtype)
    out[:, ::2, ::2] = u.data
    return _emit("dilate", [u], out, lambda g: (g[:, ::2, ::2].copy(),))


def crop(x, top: int, left: int, rows: int, cols: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data[:, top : top + rows, left : left + cols]
    if out.shape[1:] != (rows, cols):
        raise DimensionError(f"crop: window {(top, left, rows, cols)} outside {x.shape}")

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, top : top + rows, left : left + cols] = g
        return (gx,)

    return _emit("crop", [x], out, backward)
