"""Dense float64 tensors with reverse-mode automatic differentiation.

Provides exactly the operation set the segmentation network needs:
convolutions, 2x2 max pooling, ReLU, batch normalization, channel softmax,
weighted cross-entropy, plus a handful of elementwise/reduction ops used by
tests and the visualization tools.  Ops record their inputs and a backward
rule on the output tensor; ``backward`` replays the records in reverse
topological order, accumulating gradients by addition.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference/eval loops)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array, optionally tracked for autodiff.

    Image batches use row-major N x C x H x W order.  ``grad`` is lazily
    allocated as zeros of the same shape on first backward contribution.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # -- elementwise / reduction ops (small graph helpers) --

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.full_like(self.data, other))
        if other.data.shape != self.data.shape:
            raise ValueError(f"add shape mismatch: {self.data.shape} vs {other.data.shape}")
        out = _make(self.data + other.data, (self, other))
        if out._parents:
            def bwd(go):
                _send(self, go)
                _send(other, go)
            out._backward_fn = bwd
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.full_like(self.data, other))
        out = _make(self.data - other.data, (self, other))
        if out._parents:
            def bwd(go):
                _send(self, go)
                _send(other, -go)
            out._backward_fn = bwd
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if other.data.shape != self.data.shape:
                raise ValueError(f"mul shape mismatch: {self.data.shape} vs {other.data.shape}")
            out = _make(self.data * other.data, (self, other))
            if out._parents:
                a, b = self, other
                def bwd(go):
                    _send(a, go * b.data)
                    _send(b, go * a.data)
                out._backward_fn = bwd
            return out
        c = float(other)
        out = _make(self.data * c, (self,))
        if out._parents:
            def bwd(go):
                _send(self, go * c)
            out._backward_fn = bwd
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def sum(self) -> "Tensor":
        out = _make(np.array(self.data.sum()), (self,))
        if out._parents:
            def bwd(go):
                _send(self, np.full_like(self.data, float(go)))
            out._backward_fn = bwd
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = _make(np.array(self.data.mean()), (self,))
        if out._parents:
            def bwd(go):
                _send(self, np.full_like(self.data, float(go) / n))
            out._backward_fn = bwd
        return out


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked and _grad_enabled():
        out._parents = tracked
        out.requires_grad = True
    return out


def _send(t: Tensor, g: np.ndarray):
    """Deliver a gradient contribution to a parent (no-op for untracked leaves)."""
    if not (t.requires_grad or t._parents):
        return
    buf = getattr(_state, "pass_grads", None)
    if buf is not None:
        # inside backward(): keep this pass separate from .grad accumulation
        cur = buf.get(id(t))
        buf[id(t)] = g.copy() if cur is None else cur + g
    else:
        t._accumulate(g)


def backward(loss: Tensor):
    """Populate d(loss)/d(node) for every node reachable from a scalar loss.

    Repeated calls without zeroing accumulate exactly one full contribution
    per call (gradients of each pass are combined before being added to the
    persistent ``grad`` buffers).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    buf: dict = {id(loss): np.ones_like(loss.data)}
    _state.pass_grads = buf
    try:
        for node in reversed(topo):
            g = buf.get(id(node))
            if g is None:
                continue
            node._accumulate(g)
            if node._backward_fn is not None:
                node._backward_fn(g)
    finally:
        _state.pass_grads = None


# -- parameters and the optimizer step --

@dataclass
class Parameter:
    """Trainable tensor with a heavy-ball momentum buffer and a unique name path."""

    value: Tensor
    name: str
    velocity: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value.requires_grad = True
        if self.velocity is None:
            self.velocity = np.zeros_like(self.value.data)
        if self.velocity.shape != self.value.data.shape:
            raise ValueError(f"velocity shape mismatch for {self.name}")


def sgd_momentum_step(params: Sequence[Parameter], lr: float, mu: float):
    """Classic heavy-ball update: v <- mu*v + g; theta <- theta - lr*v."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0 <= mu < 1:
        raise ValueError("momentum must be in [0, 1)")
    for p in params:
        if p.value.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient; run backward first")
    for p in params:
        p.velocity *= mu
        p.velocity += p.value.grad
        p.value.data -= lr * p.velocity


# -- layer ops --

def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0.0), (x,))
    if out._parents:
        mask = x.data > 0
        def bwd(go):
            _send(x, go * mask)
        out._backward_fn = bwd
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlate x[N,Cin,H,W] with weight[Cout,Cin,kh,kw] (no kernel flip).

    Output spatial size is H + 2*padding - kh + 1; with padding (kh-1)/2 the
    input size is preserved.  Column matrices built in the forward pass are
    kept for the backward rule.
    """
    N, Cin, H, W = x.data.shape
    Cout, Cw, kh, kw = weight.data.shape
    if Cw != Cin:
        raise ValueError(
            f"conv2d channel mismatch: input has Cin={Cin}, weight expects Cin={Cw} "
            f"(input {x.data.shape}, weight {weight.data.shape})")
    if bias.data.shape != (Cout,):
        raise ValueError(f"conv2d bias must have shape ({Cout},), got {bias.data.shape}")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Ho = H + 2 * padding - kh + 1
    Wo = W + 2 * padding - kw + 1

    wm = weight.data.reshape(Cout, Cin * kh * kw)
    if kh == 1 and kw == 1 and padding == 0:
        # pointwise fast path: plain channel mixing, no columns needed
        xm = x.data.reshape(N, Cin, H * W)
        out_data = np.empty((N, Cout, H, W))
        for n in range(N):
            np.matmul(wm, xm[n], out=out_data[n].reshape(Cout, H * W))
        out_data += bias.data.reshape(1, Cout, 1, 1)
        out = _make(out_data, (x, weight, bias))
        if out._parents:
            def bwd(go):
                gom = go.reshape(N, Cout, H * W)
                dw = np.zeros((Cout, Cin))
                dx = np.empty_like(x.data)
                for n in range(N):
                    dw += gom[n] @ xm[n].T
                    np.matmul(wm.T, gom[n], out=dx[n].reshape(Cin, H * W))
                _send(x, dx)
                _send(weight, dw.reshape(weight.data.shape))
                _send(bias, go.sum(axis=(0, 2, 3)))
            out._backward_fn = bwd
        return out

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    K = Cin * kh * kw
    cols = np.empty((N, K, Ho * Wo))
    out_data = np.empty((N, Cout, Ho, Wo))
    for n in range(N):
        _kernels.im2col(xp[n], kh, kw, cols[n])
        np.matmul(wm, cols[n], out=out_data[n].reshape(Cout, Ho * Wo))
    out_data += bias.data.reshape(1, Cout, 1, 1)
    out = _make(out_data, (x, weight, bias))
    if out._parents:
        Hp, Wp = H + 2 * padding, W + 2 * padding
        def bwd(go):
            dw = np.zeros((Cout, K))
            dxp = np.zeros((N, Cin, Hp, Wp))
            for n in range(N):
                gon = go[n].reshape(Cout, Ho * Wo)
                dw += gon @ cols[n].T
                dcols = wm.T @ gon
                _kernels.col2im(dcols, kh, kw, dxp[n])
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            _send(x, dx)
            _send(weight, dw.reshape(weight.data.shape))
            _send(bias, go.sum(axis=(0, 2, 3)))
        out._backward_fn = bwd
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """2x up-convolution with a 2x2 kernel, stride 2 (the decoder's only config)."""
    N, C, H, W = x.data.shape
    Cw, Cout, kh, kw = weight.data.shape
    if stride != 2 or kh != 2 or kw != 2:
        raise ValueError("conv_transpose2d supports only kernel 2x2 with stride 2")
    if Cw != C:
        raise ValueError(f"conv_transpose2d channel mismatch: input C={C}, weight expects {Cw}")
    if H < 1 or W < 1:
        raise ValueError("input spatial dims must be positive")
    # out[n,o,2y+i,2x+j] = sum_c x[n,c,y,x] * w[c,o,i,j]; stride==kernel so blocks don't overlap
    t = np.tensordot(x.data, weight.data, axes=([1], [0]))       # N,H,W,Cout,2,2
    out_data = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(N, Cout, 2 * H, 2 * W)
    out_data += bias.data.reshape(1, Cout, 1, 1)
    out = _make(out_data, (x, weight, bias))
    if out._parents:
        def bwd(go):
            go6 = go.reshape(N, Cout, H, 2, W, 2)
            dx = np.tensordot(go6, weight.data, axes=([1, 3, 5], [1, 2, 3]))  # N,H,W,C
            _send(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
            dw = np.tensordot(x.data, go6, axes=([0, 2, 3], [0, 2, 4]))       # C,Cout,2,2
            _send(weight, dw)
            _send(bias, go.sum(axis=(0, 2, 3)))
        out._backward_fn = bwd
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient routes to the first (row-major) max of each block."""
    N, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 requires even spatial dims, got {H}x{W}")
    out_data = np.empty((N, C, H // 2, W // 2))
    idx = np.empty((N, C, H // 2, W // 2), dtype=np.int8)
    _kernels.maxpool2_forward(x.data, out_data, idx)
    out = _make(out_data, (x,))
    if out._parents:
        def bwd(go):
            dx = np.zeros_like(x.data)
            _kernels.maxpool2_backward(go, idx, dx)
            _send(x, dx)
        out._backward_fn = bwd
    return out


class BatchNormState:
    """Running statistics of one batch-norm layer (not trainable)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization over (N,H,W).

    Train mode uses biased batch statistics and updates the running stats by
    exponential moving average; eval mode applies the running stats (a fixed
    affine map, still differentiable).
    """
    N, C, H, W = x.data.shape
    g = gamma.data.reshape(1, C, 1, 1)
    if train:
        m = N * H * W
        if m < 2:
            raise ValueError("batchnorm train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        state.running_mean += state.momentum * (mean - state.running_mean)
        state.running_var += state.momentum * (var - state.running_var)
        ivar = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean.reshape(1, C, 1, 1)) * ivar.reshape(1, C, 1, 1)
        out = _make(xhat * g + beta.data.reshape(1, C, 1, 1), (x, gamma, beta))
        if out._parents:
            def bwd(go):
                dbeta = go.sum(axis=(0, 2, 3))
                dgamma = (go * xhat).sum(axis=(0, 2, 3))
                dxhat = go * g
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
                dx = (ivar.reshape(1, C, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
                _send(x, dx)
                _send(gamma, dgamma)
                _send(beta, dbeta)
            out._backward_fn = bwd
        return out

    ivar = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(1, C, 1, 1)) * ivar.reshape(1, C, 1, 1)
    out = _make(xhat * g + beta.data.reshape(1, C, 1, 1), (x, gamma, beta))
    if out._parents:
        def bwd(go):
            _send(x, go * g * ivar.reshape(1, C, 1, 1))
            _send(gamma, (go * xhat).sum(axis=(0, 2, 3)))
            _send(beta, go.sum(axis=(0, 2, 3)))
        out._backward_fn = bwd
    return out


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of x[N,K,H,W], max-shifted for stability."""
    if x.data.shape[1] < 2:
        raise ValueError("softmax_channels needs at least 2 channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _make(p, (x,))
    if out._parents:
        def bwd(go):
            dot = (go * p).sum(axis=1, keepdims=True)
            _send(x, p * (go - dot))
        out._backward_fn = bwd
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (decoder skip connections)."""
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat_channels mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = _make(np.concatenate([a.data, b.data], axis=1), (a, b))
    if out._parents:
        def bwd(go):
            _send(a, go[:, :ca])
            _send(b, go[:, ca:])
        out._backward_fn = bwd
    return out


def take_channel(x: Tensor, c: int) -> Tensor:
    """Select one channel map x[:, c] (used by the visualization objectives)."""
    if not 0 <= c < x.data.shape[1]:
        raise ValueError(f"channel {c} out of range for shape {x.data.shape}")
    out = _make(x.data[:, c].copy(), (x,))
    if out._parents:
        def bwd(go):
            dx = np.zeros_like(x.data)
            dx[:, c] = go
            _send(x, dx)
        out._backward_fn = bwd
    return out


def take_pixel(x: Tensor, n: int, c: int, row: int, col: int) -> Tensor:
    """Select the scalar x[n, c, row, col]."""
    N, C, H, W = x.data.shape
    if not (0 <= n < N and 0 <= c < C and 0 <= row < H and 0 <= col < W):
        raise ValueError(f"index ({n},{c},{row},{col}) out of range for shape {x.data.shape}")
    out = _make(np.array(x.data[n, c, row, col]), (x,))
    if out._parents:
        def bwd(go):
            dx = np.zeros_like(x.data)
            dx[n, c, row, col] = float(go)
            _send(x, dx)
        out._backward_fn = bwd
    return out


def weighted_cross_entropy(probs: Tensor, labels: np.ndarray, class_weights: Sequence[float],
                           ignore_id: int = 255) -> Tensor:
    """Class-weighted negative log likelihood averaged over non-ignored pixels.

    ``labels`` is an integer map [N,H,W] over {0..K-1} plus ``ignore_id``;
    ignored pixels carry zero weight and do not enter the divisor.  Returns
    exactly 0 (with zero gradients) when every pixel is ignored.
    """
    N, K, H, W = probs.data.shape
    labels = np.asarray(labels)
    if labels.shape != (N, H, W):
        raise ValueError(f"labels shape {labels.shape} does not match probs {probs.data.shape}")
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (K,):
        raise ValueError(f"need {K} class weights, got {w.shape}")
    valid = labels != ignore_id
    bad = valid & ((labels < 0) | (labels >= K))
    if bad.any():
        offender = labels[bad].flat[0]
        raise ValueError(f"label {offender} outside valid set 0..{K - 1} plus ignore {ignore_id}")
    count = int(valid.sum())
    denom = max(count, 1)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(probs.data, safe[:, None], axis=1)[:, 0]
    wmap = np.where(valid, w[safe], 0.0)
    loss_val = float((wmap * -np.log(np.maximum(picked, 1e-300))).sum() / denom)
    out = _make(np.array(loss_val), (probs,))
    if out._parents:
        def bwd(go):
            dp = np.zeros_like(probs.data)
            contrib = -wmap / (np.maximum(picked, 1e-300) * denom) * float(go)
            np.put_along_axis(dp, safe[:, None], contrib[:, None], axis=1)
            _send(probs, dp)
        out._backward_fn = bwd
    return out


def grad_check(make_loss: Callable[[], Tensor], wrt: Tensor, tolerance: Optional[float] = None,
               mask: Optional[np.ndarray] = None) -> float:
    """Compare the analytic gradient of a scalar loss against central differences.

    ``make_loss`` must rebuild the forward pass from current tensor contents
    (it is re-invoked after in-place perturbations of ``wrt.data``).  Step is
    1e-5 scaled by magnitude; relative error uses a 1e-8 absolute floor.
    Returns the max relative error over (optionally masked) components; if
    ``tolerance`` is given and exceeded, raises ValueError.
    """
    wrt.requires_grad = True
    wrt.zero_grad()
    loss = make_loss()
    backward(loss)
    analytic = wrt.grad.copy() if wrt.grad is not None else np.zeros_like(wrt.data)

    flat = wrt.data.reshape(-1)
    if mask is None:
        indices = range(flat.size)
    else:
        indices = np.flatnonzero(np.asarray(mask).reshape(-1))
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = float(make_loss().data)
            flat[i] = orig - h
            fm = float(make_loss().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    if tolerance is not None and worst > tolerance:
        raise ValueError(f"gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}")
    return worst
