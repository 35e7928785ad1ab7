"""Layer operations on channels-last (N, H, W, C) tensors."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import ShapeError, Tensor, _accumulate, make

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
PATCH_CACHE_BYTES = 64 * 2**20  # larger patch matrices are rebuilt in backward


@dataclass
class LayerParams:
    """Trainable and running tensors of one layer.

    Convolutions carry a (k, k, c_in, c_out) kernel and, except for skip
    projections, a batch-norm. The dense head carries a matrix and a bias.
    """

    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    bn_gamma: Optional[np.ndarray] = None
    bn_beta: Optional[np.ndarray] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None

    TRAINABLE = ("kernel", "bias", "bn_gamma", "bn_beta")

    @property
    def c_out(self) -> int:
        return self.kernel.shape[-1]

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def arrays(self) -> dict:
        names = ("kernel", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def copy(self) -> "LayerParams":
        return LayerParams(**{k: v.copy() for k, v in self.arrays().items()})

    def reset_running_stats(self) -> None:
        if self.has_bn:
            self.bn_running_mean = np.zeros(self.c_out)
            self.bn_running_var = np.ones(self.c_out)

    def validate(self, layer: str = "") -> None:
        if not self.has_bn:
            return
        for n in ("bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            v = getattr(self, n)
            if v is None or v.shape != (self.c_out,):
                raise ShapeError(layer, f"{n} must have length {self.c_out}")
        if np.any(self.bn_running_var <= 0):
            raise ValueError(f"[{layer}] running variance must be positive")


def bn_params(kernel: np.ndarray) -> LayerParams:
    c = kernel.shape[-1]
    return LayerParams(kernel=kernel, bn_gamma=np.ones(c), bn_beta=np.zeros(c),
                       bn_running_mean=np.zeros(c), bn_running_var=np.ones(c))


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return pad, ho, wo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same",
           name: Optional[str] = None) -> Tensor:
    """Convolution as one patch-matrix product (im2col)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(name, f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, h, w, c = x.shape
    k, k2, c_in, c_out = kernel.shape
    if k != k2:
        raise ShapeError(name, "only square kernels are supported")
    if c != c_in:
        raise ShapeError(name, f"input has {c} channels but kernel expects {c_in}")
    pad, ho, wo = _conv_geometry(h, w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(name, f"input {h}x{w} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    kd = kernel.data

    def patches():
        # (n*ho*wo, k*k*c) with columns ordered (i, j, channel) like the kernel
        v = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
        return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * c)

    cols = patches()
    out = cols @ kd.reshape(-1, c_out)
    if cols.nbytes > PATCH_CACHE_BYTES:
        cols = None

    def fn(g):
        g2 = g.reshape(-1, c_out)
        if kernel.requires_grad:
            _accumulate(kernel, ((cols if cols is not None else patches()).T @ g2).reshape(kd.shape))
        if x.requires_grad and stride == 1:
            # correlation of the padded output gradient with the flipped kernel
            q = k - 1 - pad
            gp = np.pad(g, ((0, 0), (q, q), (q, q), (0, 0))) if q else g
            v = sliding_window_view(gp, (k, k), axis=(1, 2))
            gcols = np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * c_out)
            flipped = kd[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c)
            _accumulate(x, (gcols @ flipped).reshape(n, h, w, c))
        elif x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += (
                        (g2 @ kd[i, j].T).reshape(n, ho, wo, c))
            _accumulate(x, gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp)

    return make(out.reshape(n, ho, wo, c_out), (x, kernel), fn)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, mode: str = "train", momentum: float = BN_MOMENTUM,
              eps: float = BN_EPS, name: Optional[str] = None) -> Tensor:
    """Per-channel normalisation ((z - m) / s) * gamma + beta.

    In train mode batch statistics are used and the running arrays are
    updated in place by an exponential moving average.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(name, f"batchnorm over {c} channels got gamma {gamma.shape}, beta {beta.shape}")
    x2 = x.data.reshape(-1, c)
    if mode == "train":
        mean = x2.mean(axis=0)
        var = x2.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean.copy(), running_var.copy()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x2 - mean) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def fn(g):
        g2 = g.reshape(-1, c)
        _accumulate(gamma, np.einsum("ij,ij->j", g2, xhat))
        _accumulate(beta, g2.sum(axis=0))
        if not x.requires_grad:
            return
        gx = g2 * gamma.data
        if mode == "train":
            gx = inv * (gx - gx.mean(axis=0) - xhat * (np.einsum("ij,ij->j", gx, xhat) / len(gx)))
        else:
            gx = gx * inv
        _accumulate(x, gx.reshape(x.shape))

    return make(out, (x, gamma, beta), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(np.where(mask, x.data, 0.0), (x,), lambda g: _accumulate(x, g * mask))


def maxpool2(x: Tensor, name: Optional[str] = None) -> Tensor:
    """2x2 max-pool with stride 2; an odd trailing row or column is dropped."""
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(name, f"maxpool2 needs spatial dims >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    win = (x.data[:, :2 * ho, :2 * wo, :]
           .reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        g4 = np.zeros((n, ho, wo, c, 4))
        np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :2 * ho, :2 * wo, :] = (g4.reshape(n, ho, wo, c, 2, 2)
                                      .transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c))
        _accumulate(x, gx)

    return make(out, (x,), fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor, name: Optional[str] = None) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(name, f"dense expects (N, {weight.shape[0]}) input, got {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(name, f"bias shape {bias.shape} does not match {weight.shape[1]} units")

    def fn(g):
        _accumulate(weight, x.data.T @ g)
        _accumulate(bias, g.sum(axis=0))
        _accumulate(x, g @ weight.data.T)

    return make(x.data @ weight.data + bias.data, (x, weight, bias), fn)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, q = logits.shape
    if q < 2:
        raise ShapeError(None, "cross entropy needs at least two classes")
    if labels.shape[0] != n:
        raise ShapeError(None, f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= q:
        raise ValueError(f"labels must lie in [0, {q})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - z[rows, labels]))

    def fn(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1.0
        _accumulate(logits, p * (g / n))

    return make(np.array(loss), (logits,), fn)
