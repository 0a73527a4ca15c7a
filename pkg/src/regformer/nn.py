"""Network building blocks: conv2d, layer norm, activations, AdamW, schedule.

Convolution is the deep-learning kind (cross-correlation, no kernel flip),
implemented as im2col + GEMM with zero "same" padding by default.  All
kernels operate on single images laid out (C, H, W) and register their
backward rules on the active tape through :func:`regformer.tensor.apply_op`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, accumulate_grad, apply_op

__all__ = [
    "ConvSpec",
    "ParamStore",
    "AdamW",
    "conv2d",
    "conv2d_raw",
    "layer_norm",
    "gelu",
    "relu",
    "activation",
    "cosine_lr",
    "uniform_fan_in",
]


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None  # None = "same" (kernel // 2)
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ShapeError(f"kernel size {self.kernel} must be odd")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not "
                f"divisible by groups={self.groups}"
            )
        if self.stride < 1:
            raise ShapeError("stride must be positive")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    @property
    def weight_shape(self):
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel,
            self.kernel,
        )


def _pad_chw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad))
    out[:, pad : pad + h, pad : pad + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int):
    """(C, Hp, Wp) zero-padded input -> ((C*k*k, S) patch matrix, (H', W'))."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H', W', k, k)
    if stride != 1:
        win = win[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    return np.ascontiguousarray(cols), (ho, wo)


@numba.njit(cache=True, fastmath=False)
def _dw_conv_kernel(xp, w, ho, wo, k):  # pragma: no cover - exercised via conv2d
    """Per-channel k*k correlation of a padded (C,Hp,Wp) input."""
    c = xp.shape[0]
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            orow = out[ch, i]
            for u in range(k):
                row = xp[ch, i + u]
                for v in range(k):
                    wv = w[ch, u, v]
                    for j in range(wo):
                        orow[j] += wv * row[j + v]
    return out


@numba.njit(cache=True, fastmath=False)
def _dw_wgrad_kernel(xp, g, k):  # pragma: no cover - exercised via conv2d
    """Per-channel weight gradient: correlate input patches with dY."""
    c, ho, wo = g.shape
    dw = np.zeros((c, k, k))
    for ch in range(c):
        for i in range(ho):
            grow = g[ch, i]
            for u in range(k):
                row = xp[ch, i + u]
                for v in range(k):
                    acc = 0.0
                    for j in range(wo):
                        acc += grow[j] * row[j + v]
                    dw[ch, u, v] += acc
    return dw


def _conv_forward(x, w, b, stride, pad, groups):
    """Dispatch on conv structure: 1x1 is a plain GEMM, depthwise a jitted
    direct correlation, anything else goes through grouped im2col.

    Returns (out, ctx): ``ctx`` is whatever the backward pass reuses (the
    padded input for depthwise, the patch matrix for the general path).
    """
    cin, h, wdt = x.shape
    cout, cin_g, k, _ = w.shape
    ctx = None
    if k == 1 and stride == 1 and pad == 0:
        s = h * wdt
        if groups == 1:
            out = (w.reshape(cout, cin) @ x.reshape(cin, s)).reshape(cout, h, wdt)
        else:
            xg = x.reshape(groups, cin_g, s)
            wg = w.reshape(groups, cout // groups, cin_g)
            out = np.matmul(wg, xg).reshape(cout, h, wdt)
    elif groups == cin == cout and stride == 1:
        xp = _pad_chw(x, pad)
        ho, wo = h + 2 * pad - k + 1, wdt + 2 * pad - k + 1
        out = _dw_conv_kernel(xp, w.reshape(cout, k, k), ho, wo, k)
        ctx = xp
    else:
        flat, (ho, wo) = _im2col(_pad_chw(x, pad), k, stride)
        ctx = flat.reshape(groups, cin_g * k * k, ho * wo)
        wmat = w.reshape(groups, cout // groups, cin_g * k * k)
        out = np.matmul(wmat, ctx).reshape(cout, ho, wo)
    if b is not None:
        out = out + b[:, None, None]
    return out, ctx


def _conv_backward_arrays(g, x, w, ctx, pad, groups):
    """Returns (dX, dW) for the stride-1 forward above."""
    cin, h, wdt = x.shape
    cout, cin_g, k, _ = w.shape
    if k == 1 and pad == 0:
        s = h * wdt
        if groups == 1:
            gm = g.reshape(cout, s)
            xm = x.reshape(cin, s)
            dw = (gm @ xm.T).reshape(w.shape)
            dx = (w.reshape(cout, cin).T @ gm).reshape(x.shape)
        else:
            gg = g.reshape(groups, cout // groups, s)
            xg = x.reshape(groups, cin_g, s)
            dw = np.matmul(gg, xg.transpose(0, 2, 1)).reshape(w.shape)
            wg = w.reshape(groups, cout // groups, cin_g)
            dx = np.matmul(wg.transpose(0, 2, 1), gg).reshape(x.shape)
        return dx, dw
    if groups == cin == cout:
        xp = ctx
        dw = _dw_wgrad_kernel(xp, g, k).reshape(w.shape)
        # Full correlation of dY with the flipped kernel gives dX; offsetting
        # the padded dY view by `pad` yields the cropped result directly.
        wflip = np.ascontiguousarray(w[:, 0, ::-1, ::-1])
        gp = _pad_chw(g, k - 1)
        dx = _dw_conv_kernel(gp[:, pad:, pad:], wflip, h, wdt, k)
        return dx, dw
    # general grouped path
    ho, wo = g.shape[1], g.shape[2]
    gg = g.reshape(groups, cout // groups, ho * wo)
    dw = np.matmul(gg, ctx.transpose(0, 2, 1)).reshape(w.shape)
    wt = w.reshape(groups, cout // groups, cin_g, k, k)
    wt = np.ascontiguousarray(wt.transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1])
    gflat, (hi, wi) = _im2col(_pad_chw(g, k - 1), k, 1)
    gcols = gflat.reshape(groups, (cout // groups) * k * k, hi * wi)
    wt_g = wt.reshape(groups, cin_g, (cout // groups) * k * k)
    dxp = np.matmul(wt_g, gcols).reshape(cin, hi, wi)
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int | None = None,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of a (C,H,W) tensor with zero padding.

    ``weight`` has shape (out, in/groups, k, k); depthwise convolution is
    ``groups == in == out``.  The default padding keeps spatial extents
    unchanged for stride 1.
    """
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    cin = x.shape[0]
    if cin != cin_g * groups or cout % groups:
        raise ShapeError(
            f"input channels {cin} incompatible with weight {weight.shape} "
            f"and groups={groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} outputs")
    pad = k // 2 if padding is None else padding
    out, cols = _conv_forward(
        x.data, weight.data, None if bias is None else bias.data, stride, pad, groups
    )

    def backward(g):
        if stride != 1:
            raise ShapeError("backward implemented for stride 1 only")
        dx, dw = _conv_backward_arrays(g, x.data, weight.data, cols, pad, groups)
        accumulate_grad(x, dx)
        accumulate_grad(weight, dw)
        if bias is not None:
            accumulate_grad(bias, np.sum(g, axis=(1, 2)))

    return apply_op(out, (x, weight, bias) if bias is not None else (x, weight), backward)


def conv2d_raw(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    *,
    stride: int = 1,
    padding: int | None = None,
    groups: int = 1,
) -> np.ndarray:
    """Array-in/array-out conv2d for paths that never need gradients."""
    k = weight.shape[2]
    pad = k // 2 if padding is None else padding
    out, _ = _conv_forward(x, weight, bias, stride, pad, groups)
    return out


@numba.njit(cache=True, fastmath=False)
def _ln_fwd_kernel(x2, gamma, beta, eps):  # pragma: no cover - via layer_norm
    c, s = x2.shape
    mu = np.zeros(s)
    for ch in range(c):
        row = x2[ch]
        for j in range(s):
            mu[j] += row[j]
    for j in range(s):
        mu[j] /= c
    var = np.zeros(s)
    for ch in range(c):
        row = x2[ch]
        for j in range(s):
            d = row[j] - mu[j]
            var[j] += d * d
    inv = np.empty(s)
    for j in range(s):
        inv[j] = 1.0 / math.sqrt(var[j] / c + eps)
    out = np.empty((c, s))
    xhat = np.empty((c, s))
    for ch in range(c):
        gm, bt = gamma[ch], beta[ch]
        row = x2[ch]
        for j in range(s):
            xh = (row[j] - mu[j]) * inv[j]
            xhat[ch, j] = xh
            out[ch, j] = gm * xh + bt
    return out, xhat, inv


@numba.njit(cache=True, fastmath=False)
def _ln_bwd_kernel(g2, xhat, inv, gamma):  # pragma: no cover - via layer_norm
    c, s = g2.shape
    m1 = np.zeros(s)
    m2 = np.zeros(s)
    for ch in range(c):
        gm = gamma[ch]
        grow, xrow = g2[ch], xhat[ch]
        for j in range(s):
            gh = grow[j] * gm
            m1[j] += gh
            m2[j] += gh * xrow[j]
    for j in range(s):
        m1[j] /= c
        m2[j] /= c
    dx = np.empty((c, s))
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for ch in range(c):
        gm = gamma[ch]
        grow, xrow = g2[ch], xhat[ch]
        sg = 0.0
        sb = 0.0
        for j in range(s):
            gh = grow[j] * gm
            dx[ch, j] = (gh - m1[j] - xrow[j] * m2[j]) * inv[j]
            sg += grow[j] * xrow[j]
            sb += grow[j]
        dgamma[ch] = sg
        dbeta[ch] = sb
    return dx, dgamma, dbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each spatial position across its C channel values.

    The pre-affine result has per-pixel mean 0 and variance 1 (up to the
    eps inside the square root); gamma scales and beta shifts per channel.
    """
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine shapes {gamma.shape}/{beta.shape} do not match C={c}")
    spatial = x.shape[1:]
    x2 = np.ascontiguousarray(x.data.reshape(c, -1))
    out, xhat, inv = _ln_fwd_kernel(x2, gamma.data, beta.data, eps)

    def backward(g):
        dx, dgamma, dbeta = _ln_bwd_kernel(
            np.ascontiguousarray(g.reshape(c, -1)), xhat, inv, gamma.data
        )
        accumulate_grad(x, dx.reshape(x.shape))
        accumulate_grad(gamma, dgamma)
        accumulate_grad(beta, dbeta)

    return apply_op(out.reshape((c,) + spatial), (x, gamma, beta), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def backward(g):
        density = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        accumulate_grad(x, g * (phi + x.data * density))

    return apply_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = (x.data > 0.0).astype(np.float64)

    def backward(g):
        accumulate_grad(x, g * mask)

    return apply_op(out, (x,), backward)


def activation(name: str):
    if name == "gelu":
        return gelu
    if name == "relu":
        return relu
    raise ValueError(f"unknown activation {name!r}")


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float) -> float:
    """Cosine annealing from lr0 at step 0 down to lr_min at total_steps."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Named, ordered collection of trainable tensors.

    Paths are '/'-separated (e.g. ``encoder/level0/rtb1/rma/qkv/w``) and
    iteration follows insertion order, which doubles as the checkpoint and
    initialization order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, tensor: Tensor):
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        self._params[path] = tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def scalar_count(self) -> int:
        return sum(t.size for t in self._params.values())


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    The weight-decay term ``p -= lr * wd * p`` is applied after the
    bias-corrected moment update, not folded into the gradient.
    """

    def __init__(
        self,
        params: list[Tensor],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad_or_zeros()
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != param {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data

    def state_arrays(self):
        """Moment buffers in parameter order, for checkpointing."""
        return self.t, self.m, self.v

    def load_state(self, t: int, m: list[np.ndarray], v: list[np.ndarray]):
        if len(m) != len(self.params) or len(v) != len(self.params):
            raise ShapeError("optimizer state length mismatch")
        for buf, p in zip(m, self.params):
            if buf.shape != p.data.shape:
                raise ShapeError("optimizer moment shape mismatch")
        self.t = t
        self.m = [np.array(a, dtype=np.float64) for a in m]
        self.v = [np.array(a, dtype=np.float64) for a in v]
