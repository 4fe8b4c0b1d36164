"""Dense tensors with tape-based reverse-mode differentiation.

Only the layers the embedding network needs are provided: convolution,
ReLU, global max/average pooling, affine projection, l2-normalisation,
dot product, softmax cross-entropy and the triplet hinge.

Operations are recorded on the innermost active :class:`Tape`; with no
tape active they run forward-only.  The spatial ops accept an optional
leading batch axis so fixed-size pretraining batches can be vectorised.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateVectorError, NumericFault, ShapeError, ValidationError

NORM_EPS = 1e-12
DEFAULT_MARGIN = 0.1


class Tensor:
    """A numpy array plus an optional gradient buffer.

    ``data`` is float32 for training and float64 on the verification path;
    ops keep the dtype of their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name, dtype=None)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable
    # distance of this op's computation from a non-differentiable point
    kink: float = math.inf


@dataclass
class Tape:
    records: list = field(default_factory=list)
    visits: int = 0

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def kink_margin(self):
        """Smallest distance of any recorded ReLU/max/hinge from its kink."""
        return min((r.kink for r in self.records), default=math.inf)


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape():
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op, inputs, out_data, backward_fn, kink=math.inf):
    out = Tensor(out_data, dtype=None)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(Record(op, tuple(inputs), out, backward_fn, kink))
    return out


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"{op}: non-finite values produced")


# ---------------------------------------------------------------- layers


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[Cin,H,W]`` or ``[N,Cin,H,W]``; ``w`` is ``[Cout,Cin,kh,kw]``.
    Products are accumulated in float64 and rounded once to the input dtype.
    """
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    if w.data.ndim != 4 or b.data.ndim != 1:
        raise ShapeError(f"conv2d: weight must be 4-D and bias 1-D, got {w.shape} and {b.shape}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, cin, h, wd = xd.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if b.shape[0] != cout:
        raise ShapeError(f"conv2d: bias length {b.shape[0]} != {cout} output channels")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}"
        )
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    acc = cols.astype(np.float64, copy=False) @ wmat.astype(np.float64, copy=False).T
    acc += b.data.astype(np.float64, copy=False)
    out = acc.astype(x.dtype, copy=False).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out if batched else out[0])

    def backward(g):
        go = (g if batched else g[None]).transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (go.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = go.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (go @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hspan = stride * (ho - 1) + 1
            wspan = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            gx = gx if batched else gx[0]
        return gx, gw, gb

    return _emit("conv2d", (x, w, b), out, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    kink = float(np.min(np.abs(x.data))) if x.data.size else math.inf
    return _emit("relu", (x,), out, backward, kink)


def _spatial(x, op):
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"{op}: input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"{op}: empty spatial extent {x.shape}")
    return x.data.reshape(*x.shape[:-2], -1)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum; ties resolve to the first row-major position."""
    flat = _spatial(x, "global_max_pool")
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, arg[..., None], g[..., None], axis=-1)
        return (gx.reshape(x.shape),)

    kink = math.inf
    if flat.shape[-1] > 1:
        top2 = np.partition(flat, -2, axis=-1)[..., -2:]
        kink = float(np.min(top2[..., 1] - top2[..., 0]))
    return _emit("global_max_pool", (x,), out, backward, kink)


def global_avg_pool(x: Tensor) -> Tensor:
    flat = _spatial(x, "global_avg_pool")
    count = flat.shape[-1]
    out = flat.mean(axis=-1, dtype=np.float64).astype(x.dtype)

    def backward(g):
        gx = np.broadcast_to((g / count)[..., None], flat.shape)
        return (np.ascontiguousarray(gx).reshape(x.shape),)

    return _emit("global_avg_pool", (x,), out, backward)


def affine(v: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``W @ v + b`` for ``v`` of shape ``[Din]`` or ``[N,Din]``."""
    if w.data.ndim != 2 or b.data.ndim != 1 or v.data.ndim not in (1, 2):
        raise ShapeError(f"affine: bad ranks v={v.shape} W={w.shape} b={b.shape}")
    if v.shape[-1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ShapeError(f"affine: shapes do not agree v={v.shape} W={w.shape} b={b.shape}")
    out = v.data @ w.data.T + b.data

    def backward(g):
        gv = g @ w.data if v.requires_grad else None
        if g.ndim == 1:
            gw = np.outer(g, v.data) if w.requires_grad else None
            gb = g
        else:
            gw = g.T @ v.data if w.requires_grad else None
            gb = g.sum(axis=0)
        return gv, gw, gb

    return _emit("affine", (v, w, b), out, backward)


def l2_normalize(u: Tensor) -> Tensor:
    if u.data.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize: expected [D] or [N,D], got {u.shape}")
    norm = np.sqrt(np.sum(u.data.astype(np.float64) ** 2, axis=-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError(f"l2_normalize: vector norm {float(norm.min()):.3g} <= {NORM_EPS}")
    e = (u.data / norm).astype(u.dtype)
    inv = (1.0 / norm).astype(u.dtype)

    def backward(g):
        proj = np.sum(e * g, axis=-1, keepdims=True)
        return ((g - e * proj) * inv,)

    return _emit("l2_normalize", (u,), e, backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
    out = np.asarray(a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(a.dtype)

    def backward(g):
        return g * b.data, g * a.data

    return _emit("dot", (a, b), out, backward)


def softmax_cross_entropy(logits: Tensor, label) -> Tensor:
    """``-log softmax(logits)[label]``; for ``[N,K]`` logits, the batch mean."""
    z = logits.data.astype(np.float64)
    batched = z.ndim == 2
    if z.ndim not in (1, 2):
        raise ShapeError(f"softmax_cross_entropy: expected [K] or [N,K], got {logits.shape}")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    zz = z if batched else z[None]
    k = zz.shape[1]
    if labels.shape[0] != zz.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {zz.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValidationError(f"softmax_cross_entropy: label out of range [0,{k})")
    shifted = zz - zz.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(zz.shape[0])
    losses = lse - shifted[rows, labels]
    out = np.asarray(losses.mean()).astype(logits.dtype)
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    probs /= zz.shape[0]

    def backward(g):
        gl = (probs * g).astype(logits.dtype)
        return (gl if batched else gl[0],)

    return _emit("softmax_cross_entropy", (logits,), out, backward)


def triplet_hinge(q: Tensor, dpos: Tensor, dneg: Tensor, m=DEFAULT_MARGIN) -> Tensor:
    """Ranking loss ``max(0, m + q.dneg - q.dpos)``, evaluated in float64."""
    if not (q.shape == dpos.shape == dneg.shape) or q.data.ndim != 1:
        raise ShapeError(f"triplet_hinge: mismatched shapes {q.shape} {dpos.shape} {dneg.shape}")
    q64 = q.data.astype(np.float64)
    sp = q64 @ dpos.data.astype(np.float64)
    sn = q64 @ dneg.data.astype(np.float64)
    value = m + sn - sp
    active = value > 0
    out = np.asarray(value if active else 0.0).astype(q.dtype)

    def backward(g):
        if not active:
            z = np.zeros_like(q.data)
            return z, z, z
        return g * (dneg.data - dpos.data), -g * q.data, g * q.data

    return _emit("triplet_hinge", (q, dpos, dneg), out, backward, abs(float(value)))


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor, seed=None, wrt: Sequence[Tensor] = ()):
    """Reverse sweep over ``tape`` starting from ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``.  A custom
    ``seed`` turns the sweep into a vector-Jacobian product and is the only
    way to start from a non-scalar output.  Returns ``{tensor: grad}`` for
    the tensors in ``wrt`` (intermediates allowed).
    """
    if seed is None:
        if loss.data.ndim != 0 and loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    else:
        seed = np.asarray(seed, dtype=loss.dtype).reshape(loss.shape)
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise ValidationError("backward: loss was not produced on this tape")

    wanted = {id(t): t for t in wrt}
    captured = {}
    grads = {id(loss): seed}
    leaves = {}
    for rec in reversed(tape.records):
        tape.visits += 1
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        if id(rec.output) in wanted:
            captured[id(rec.output)] = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if key in wanted:
            captured[key] = g
    out = {}
    for key, t in wanted.items():
        out[t] = captured.get(key, np.zeros_like(t.data))
    return out


def zero_grads(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- optimiser


class SGDMomentum:
    """SGD with heavy-ball momentum and L2 weight decay.

    ``v <- momentum*v + (g + wd*p)``, ``p <- p - lr*v``.  Velocities persist
    across steps, keyed by parameter position.
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, grads, lr):
        if len(grads) != len(self.params):
            raise ShapeError(f"sgd: {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"sgd: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"sgd: non-finite gradient for {p.name or 'parameter'}")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            v = self.momentum * self.velocities[i] + (g + self.weight_decay * p.data)
            self.velocities[i] = v.astype(p.dtype, copy=False)
            p.data = (p.data - lr * self.velocities[i]).astype(p.dtype, copy=False)
        self.steps += 1


def sgd_momentum_step(params, grads, lr, momentum, weight_decay, velocities=None):
    """Functional form: returns the updated velocity list (created if absent)."""
    opt = SGDMomentum(params, momentum, weight_decay)
    if velocities is not None:
        opt.velocities = list(velocities)
    opt.step(grads, lr)
    return opt.velocities


# ---------------------------------------------------------------- checking


def finite_diff_check(fn, inputs, eps=1e-4):
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps the input tensor(s) to a scalar tensor.  Everything runs at
    float64; relative error uses ``max(|analytic|, |numeric|, 1e-8)``.
    """
    single = isinstance(inputs, Tensor)
    base = [inputs] if single else list(inputs)
    xs = [Tensor(t.data, requires_grad=True, dtype=np.float64) for t in base]

    with Tape() as tape:
        out = fn(xs[0]) if single else fn(*xs)
    backward(tape, out)
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    def evaluate():
        return float((fn(xs[0]) if single else fn(*xs)).data)

    worst = 0.0
    for x, ga in zip(xs, analytic):
        flat = x.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate()
            flat[i] = orig - eps
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            denom = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / denom)
    return worst
