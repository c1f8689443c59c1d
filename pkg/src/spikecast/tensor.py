"""Dense tensor ops for small convolutional classifiers.

Feature maps are numpy arrays laid out rows x columns x channels; every op
also accepts a leading batch axis.  Convolution kernels are kh x kw x cin x
cout.  Training-path math is float64, inference and simulation may run in
float32.

Forward passes are im2col + one matmul; backward passes are expressed as
convolutions again (dilate, pad, correlate with the flipped kernel) so there
is no scatter in the hot path.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when an operand dimension disagrees with a layer, naming it."""


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


class EmptyDatasetError(ValueError):
    """Raised when an operation requires at least one sample."""


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None, ...], False
    if x.ndim == rank + 1:
        return x, True
    raise ShapeMismatchError(
        f"expected a rank-{rank} tensor or a batch of them, got shape {x.shape}"
    )


def conv_output_extent(extent: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-extent // stride)  # ceil
    if padding == "valid":
        return (extent - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _same_pad(extent: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    lo = total // 2
    return lo, total - lo


def _pad_spatial(x: np.ndarray, ph: tuple[int, int], pw: tuple[int, int]) -> np.ndarray:
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def _padded_input(x: np.ndarray, kh: int, kw: int, stride: int, padding: str):
    """Padded batch plus the (pad_top, pad_left) origin of the crop."""
    n, h, w, c = x.shape
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pad(h, kh, stride), _same_pad(w, kw, stride)
        return _pad_spatial(x, (pt, pb), (pl, pr)), pt, pl
    if padding == "valid":
        return x, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: str = "valid",
) -> np.ndarray:
    """Cross-correlation with bias.

    x is (H, W, C) or (N, H, W, C); kernel is (kh, kw, cin, cout).  Computed
    as one full-frame GEMM per kernel offset followed by a shifted
    accumulate, which avoids materialising an im2col buffer.
    """
    xb, batched = _as_batch(x, 3)
    kh, kw, cin, cout = kernel.shape
    if xb.shape[3] != cin:
        raise ShapeMismatchError(
            f"input channels ({xb.shape[3]}) do not match kernel cin ({cin})"
        )
    if bias.shape != (cout,):
        raise ShapeMismatchError(
            f"bias length {bias.shape} does not match kernel cout ({cout})"
        )
    n, h, w, _ = xb.shape
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError(
            f"convolution output extent is not positive for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    xp, _, _ = _padded_input(xb, kh, kw, stride, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    flat = xp.reshape(-1, cin)
    out = np.empty((n, oh, ow, cout), dtype=xp.dtype)
    out[:] = bias
    for a in range(kh):
        for b in range(kw):
            y = (flat @ kernel[a, b]).reshape(n, hp, wp, cout)
            out += y[:, a : a + oh * stride : stride, b : b + ow * stride : stride, :]
    return out if batched else out[0]


def conv2d_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    upstream: np.ndarray,
    stride: int = 1,
    padding: str = "valid",
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward; returns (input_grad, kernel_grad, bias_grad)."""
    xb, batched = _as_batch(x, 3)
    kh, kw, cin, cout = kernel.shape
    ub, _ = _as_batch(upstream, 3)
    n, h, w, _ = xb.shape
    oh = conv_output_extent(h, kh, stride, padding)
    ow = conv_output_extent(w, kw, stride, padding)
    if ub.shape != (n, oh, ow, cout):
        raise ShapeMismatchError(
            f"upstream gradient shape {ub.shape} does not match forward output "
            f"({n}, {oh}, {ow}, {cout})"
        )

    xp, pt, pl = _padded_input(xb, kh, kw, stride, padding)
    hp, wp = xp.shape[1], xp.shape[2]
    xflat = xp.reshape(-1, cin)
    gk = np.empty_like(kernel)
    uf = np.zeros((n, hp, wp, cout), dtype=ub.dtype)
    for a in range(kh):
        for b in range(kw):
            uf[:] = 0.0
            uf[:, a : a + oh * stride : stride, b : b + ow * stride : stride, :] = ub
            gk[a, b] = xflat.T @ uf.reshape(-1, cout)
    gb = ub.sum(axis=(0, 1, 2))

    gx = None
    if need_input_grad:
        dxp = np.zeros_like(xp)
        upf = ub.reshape(-1, cout)
        for a in range(kh):
            for b in range(kw):
                y = (upf @ kernel[a, b].T).reshape(n, oh, ow, cin)
                dxp[:, a : a + oh * stride : stride, b : b + ow * stride : stride, :] += y
        gx = dxp[:, pt : pt + h, pl : pl + w]
        if not batched:
            gx = gx[0]
    return gx, gk, gb


def maxpool_forward(x: np.ndarray, size: int = 2, stride: int = 2) -> np.ndarray:
    xb, batched = _as_batch(x, 3)
    win = np.lib.stride_tricks.sliding_window_view(xb, (size, size), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, OH, OW, C, size, size)
    out = win.max(axis=(4, 5))
    return out if batched else out[0]


def maxpool_backward(
    x: np.ndarray, upstream: np.ndarray, size: int = 2, stride: int = 2
) -> np.ndarray:
    """Routes each window's gradient to its first maximum (deterministic)."""
    xb, batched = _as_batch(x, 3)
    ub, _ = _as_batch(upstream, 3)
    n, h, w, c = xb.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    if ub.shape != (n, oh, ow, c):
        raise ShapeMismatchError(
            f"upstream gradient shape {ub.shape} does not match pool output "
            f"({n}, {oh}, {ow}, {c})"
        )
    win = np.lib.stride_tricks.sliding_window_view(xb, (size, size), axis=(1, 2))
    win = win[:, ::stride, ::stride].reshape(n, oh, ow, c, size * size)
    arg = win.argmax(axis=4)[..., None]  # (N, OH, OW, C, 1)
    scattered = np.zeros((n, oh, ow, c, size * size), dtype=ub.dtype)
    np.put_along_axis(scattered, arg, ub[..., None], axis=4)
    gx = np.zeros_like(xb)
    scattered = scattered.reshape(n, oh, ow, c, size, size)
    for a in range(size):
        for b in range(size):
            gx[:, a : a + oh * stride : stride, b : b + ow * stride : stride, :] += (
                scattered[:, :, :, :, a, b]
            )
    return gx if batched else gx[0]


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    xb, batched = _as_batch(x, 1)
    din, dout = weights.shape
    if xb.shape[1] != din:
        raise ShapeMismatchError(
            f"input length ({xb.shape[1]}) does not match weight rows ({din})"
        )
    out = xb @ weights + bias
    return out if batched else out[0]


def dense_backward(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xb, batched = _as_batch(x, 1)
    ub, _ = _as_batch(upstream, 1)
    if ub.shape != (xb.shape[0], weights.shape[1]):
        raise ShapeMismatchError(
            f"upstream gradient shape {ub.shape} does not match output "
            f"({xb.shape[0]}, {weights.shape[1]})"
        )
    gw = xb.T @ ub
    gb = ub.sum(axis=0)
    gx = ub @ weights.T
    return (gx if batched else gx[0]), gw, gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def rate_relu_forward(x: np.ndarray, ceiling: float) -> np.ndarray:
    """Smooth firing-rate abstraction: ReLU clipped at the rate ceiling
    (expressed in activation units)."""
    return np.clip(x, 0.0, ceiling)


def rate_relu_backward(x: np.ndarray, ceiling: float, upstream: np.ndarray) -> np.ndarray:
    return upstream * ((x > 0) & (x < ceiling))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if np.asarray(x).size == 0:
        raise EmptyDatasetError("softmax of an empty tensor")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    lb, _ = _as_batch(logits, 1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lb.shape[0] == 0:
        raise EmptyDatasetError("cross entropy over zero samples")
    if labels.shape[0] != lb.shape[0]:
        raise ShapeMismatchError(
            f"labels ({labels.shape[0]}) do not match logits batch ({lb.shape[0]})"
        )
    z = lb - lb.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(lb.shape[0]), labels].mean())


def softmax_cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    lb, batched = _as_batch(logits, 1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    p = softmax(lb, axis=1)
    p[np.arange(lb.shape[0]), labels] -= 1.0
    p /= lb.shape[0]
    return p if batched else p[0]
