"""Minimal deterministic tensor engine for the segmentation network.

Every layer comes as an explicit forward/backward pair operating on 4-D
tensors laid out (batch, channel, row, col). Storage is float32; reductions
(convolution sums, means, losses) accumulate in float64 and are rounded back
to float32, which keeps results bit-reproducible for identical inputs while
retaining accuracy.

Conventions fixed here:
  * convolutions are zero-padded "same" with odd kernels only;
  * max-pool ties resolve to the first element in row-major patch order;
  * 2x upsampling is nearest-neighbor;
  * cross-entropy probabilities are clamped at 1e-7 before the log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

CE_PROB_FLOOR = 1e-7


class Tensor:
    """Dense (n, c, h, w) float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        if grad is not None:
            grad = np.asarray(grad, dtype=np.float32)
            if grad.shape != arr.shape:
                raise ShapeError(f"grad shape {grad.shape} does not match data shape {arr.shape}")
        self.grad = grad

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


@dataclass
class ConvFilter:
    """Convolution kernel bank: weights (out_ch, in_ch, kh, kw) plus per-output bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.weights.ndim != 4:
            raise ShapeError(f"filter weights must be 4-D, got shape {self.weights.shape}")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel sides must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match out_channels {self.weights.shape[0]}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]


@dataclass
class BatchNormState:
    """Learned scale/shift plus running statistics for one channel axis."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99
    batches_tracked: int = 0

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float32)
        self.beta = np.asarray(self.beta, dtype=np.float32)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float32)
        self.running_var = np.asarray(self.running_var, dtype=np.float32)
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.99) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=np.float32),
            beta=np.zeros(channels, dtype=np.float32),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            epsilon=epsilon,
            momentum=momentum,
        )


def _pad_input_f64(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def conv2d_forward(x: Tensor, filt: ConvFilter) -> Tensor:
    """Zero-padded same-size 2-D convolution (cross-correlation layout).

    Each output pixel is the channel/kernel triple sum of input pixels times
    filter taps, plus the per-output bias. Accumulation runs in float64.
    """
    n, c, h, w = x.shape
    if c != filt.in_channels:
        raise ShapeError(f"input has {c} channels but filter expects {filt.in_channels}")
    kh, kw = filt.weights.shape[2:]
    ph, pw = kh // 2, kw // 2
    xp = _pad_input_f64(x.data, ph, pw)
    w64 = filt.weights.astype(np.float64)
    acc = np.zeros((n, filt.out_channels, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + h, j:j + w]
            acc += np.tensordot(w64[:, :, i, j], window, axes=([1], [1])).transpose(1, 0, 2, 3)
    acc += filt.bias.astype(np.float64)[None, :, None, None]
    return Tensor(acc.astype(np.float32))


def conv2d_backward(
    x: Tensor, filt: ConvFilter, upstream: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    n, c, h, w = x.shape
    if c != filt.in_channels:
        raise ShapeError(f"input has {c} channels but filter expects {filt.in_channels}")
    if upstream.shape != (n, filt.out_channels, h, w):
        raise ShapeError(
            f"upstream shape {upstream.shape} does not match output shape "
            f"{(n, filt.out_channels, h, w)}"
        )
    kh, kw = filt.weights.shape[2:]
    ph, pw = kh // 2, kw // 2
    xp = _pad_input_f64(x.data, ph, pw)
    g64 = upstream.data.astype(np.float64)
    w64 = filt.weights.astype(np.float64)

    xg_pad = np.zeros_like(xp)
    wgrad = np.zeros_like(w64)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + h, j:j + w]
            wgrad[:, :, i, j] = np.tensordot(g64, window, axes=([0, 2, 3], [0, 2, 3]))
            xg_pad[:, :, i:i + h, j:j + w] += np.tensordot(
                w64[:, :, i, j], g64, axes=([0], [1])
            ).transpose(1, 0, 2, 3)
    xgrad = xg_pad[:, :, ph:ph + h, pw:pw + w]
    bgrad = g64.sum(axis=(0, 2, 3))
    return (
        Tensor(xgrad.astype(np.float32)),
        wgrad.astype(np.float32),
        bgrad.astype(np.float32),
    )


def relu_forward(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0.0))


def relu_backward(x: Tensor, upstream: Tensor) -> Tensor:
    """Pass the upstream gradient where the input was strictly positive."""
    return Tensor(np.where(x.data > 0, upstream.data, 0.0).astype(np.float32))


def maxpool2_forward(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 stride-2 max pooling; returns output plus per-patch argmax codes 0..3.

    Patch elements are scanned row-major, so a tie selects the first maximum.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial sides, got {h}x{w}")
    patches = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    argmax = patches.argmax(axis=4).astype(np.uint8)
    out = np.take_along_axis(patches, argmax[..., None].astype(np.intp), axis=4)[..., 0]
    return Tensor(out), argmax


def maxpool2_backward(argmax: np.ndarray, upstream: Tensor) -> Tensor:
    """Route each upstream value to the stored argmax position of its patch."""
    n, c, ho, wo = upstream.shape
    patches = np.zeros((n, c, ho, wo, 4), dtype=np.float32)
    np.put_along_axis(patches, argmax[..., None].astype(np.intp), upstream.data[..., None], axis=4)
    out = (
        patches.reshape(n, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * 2, wo * 2)
    )
    return Tensor(out)


def upsample2_forward(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block."""
    return Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))


def upsample2_backward(upstream: Tensor) -> Tensor:
    """Sum the upstream gradient over each replicated 2x2 block."""
    n, c, h, w = upstream.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upsample2 upstream must have even sides, got {h}x{w}")
    g = upstream.data.astype(np.float64).reshape(n, c, h // 2, 2, w // 2, 2)
    return Tensor(g.sum(axis=(3, 5)).astype(np.float32))


def _batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel normalization over (n, h, w), then gamma * xhat + beta.

    Train mode normalizes with batch statistics and folds them into the
    running averages (running = momentum * running + (1 - momentum) * batch).
    Infer mode uses the running statistics and requires at least one prior
    train-mode update.
    """
    n, c, h, w = x.shape
    if state.gamma.shape != (c,):
        raise ShapeError(f"batchnorm state has {state.gamma.shape[0]} channels, input has {c}")
    if mode == "train":
        mean, var = _batch_stats(x.data)
        m = state.momentum
        state.running_mean = (m * state.running_mean.astype(np.float64) + (1 - m) * mean).astype(
            np.float32
        )
        state.running_var = (m * state.running_var.astype(np.float64) + (1 - m) * var).astype(
            np.float32
        )
        state.batches_tracked += 1
    elif mode == "infer":
        if state.batches_tracked == 0:
            raise ValueError("batchnorm infer mode before any running-stat update")
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data.astype(np.float64) - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = state.gamma.astype(np.float64)[None, :, None, None] * xhat
    out += state.beta.astype(np.float64)[None, :, None, None]
    return Tensor(out.astype(np.float32))


def batchnorm_backward(
    x: Tensor, state: BatchNormState, upstream: Tensor
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Train-mode gradients w.r.t. input, gamma, and beta.

    Batch statistics are recomputed from the stored layer input, so the
    backward pass needs no cache from the forward call.
    """
    n, c, h, w = x.shape
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match input {x.shape}")
    mean, var = _batch_stats(x.data)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x64 = x.data.astype(np.float64)
    g64 = upstream.data.astype(np.float64)
    xhat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]

    dgamma = (g64 * xhat).sum(axis=(0, 2, 3))
    dbeta = g64.sum(axis=(0, 2, 3))

    m = n * h * w
    dxhat = g64 * state.gamma.astype(np.float64)[None, :, None, None]
    # dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return Tensor(dx.astype(np.float32)), dgamma.astype(np.float32), dbeta.astype(np.float32)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two tensors along the channel axis, a first."""
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"spatial/batch mismatch in concat: {a.shape} vs {b.shape}")
    return Tensor(np.concatenate([a.data, b.data], axis=1))


def concat_channels_backward(upstream: Tensor, channels_a: int) -> tuple[Tensor, Tensor]:
    """Split the upstream gradient at the channel boundary of the first input."""
    if channels_a > upstream.shape[1]:
        raise ShapeError(
            f"split point {channels_a} exceeds upstream channels {upstream.shape[1]}"
        )
    return (
        Tensor(upstream.data[:, :channels_a].copy()),
        Tensor(upstream.data[:, channels_a:].copy()),
    )


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across channels, stabilized by max subtraction."""
    z = x.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=1, keepdims=True)
    return Tensor(e.astype(np.float32))


def masked_cross_entropy(
    probs: Tensor, labels: np.ndarray, class_weights: np.ndarray | None = None
) -> tuple[float, Tensor]:
    """Mean negative log-likelihood over labeled pixels.

    `labels` holds per-pixel codes (0 = unlabeled, 1..C map to channels
    0..C-1). Unlabeled pixels contribute neither loss nor gradient. The
    returned gradient is taken w.r.t. the pre-softmax logits (the usual fused
    softmax + cross-entropy form), scaled by the labeled-pixel count, so it
    plugs in directly below the softmax head.
    """
    n, c, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match probs {(n, h, w)}")
    labeled = labels > 0
    n_labeled = int(labeled.sum())
    if n_labeled == 0:
        raise ValueError("empty batch: no labeled pixels")

    idx = np.clip(labels.astype(np.intp) - 1, 0, c - 1)
    p_true = np.take_along_axis(probs.data, idx[:, None, :, :], axis=1)[:, 0]

    if class_weights is not None:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (c,):
            raise ShapeError(f"class_weights must have length {c}")
        pix_w = np.where(labeled, class_weights[idx], 0.0)
    else:
        pix_w = labeled.astype(np.float64)
    total_w = pix_w.sum()

    logp = np.log(np.clip(p_true.astype(np.float64), CE_PROB_FLOOR, 1.0))
    loss = -(pix_w * logp).sum() / total_w

    grad = probs.data.astype(np.float64)
    one_hot_rows = np.zeros_like(grad)
    np.put_along_axis(one_hot_rows, idx[:, None, :, :], 1.0, axis=1)
    grad -= one_hot_rows
    grad *= (pix_w / total_w)[:, None, :, :]
    return float(loss), Tensor(grad.astype(np.float32))


def l2_penalty(filters: list[ConvFilter], coeff: float) -> tuple[float, list[np.ndarray]]:
    """coeff * sum of squared convolution weights; biases are exempt."""
    if coeff < 0:
        raise ValueError("l2 coefficient must be non-negative")
    term = 0.0
    grads = []
    for f in filters:
        w64 = f.weights.astype(np.float64)
        term += coeff * float((w64 * w64).sum())
        grads.append((2.0 * coeff * w64).astype(np.float32))
    return term, grads


def gradient_check(
    loss_and_grad_fn,
    params: list[np.ndarray],
    eps: float = 1e-3,
    samples: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_and_grad_fn(params)` must return (scalar loss, list of gradient
    arrays matching params). Up to `samples` coordinates per parameter are
    perturbed in place; the divisor uses the actually stored +/- values, so
    float32 parameter quantization does not bias the estimate. Returns the
    maximum relative error over all sampled coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    loss0, analytic = loss_and_grad_fn(params)
    if not np.isfinite(loss0):
        raise ValueError(f"non-finite loss {loss0!r} in gradient check")

    max_rel = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        size = flat.shape[0]
        coords = np.arange(size) if size <= samples else rng.choice(size, size=samples, replace=False)
        for k in coords:
            orig = flat[k]
            flat[k] = np.float64(orig) + eps
            hi = flat[k]
            loss_hi = float(loss_and_grad_fn(params)[0])
            flat[k] = np.float64(orig) - eps
            lo = flat[k]
            loss_lo = float(loss_and_grad_fn(params)[0])
            flat[k] = orig
            if not np.isfinite(loss_hi) or not np.isfinite(loss_lo):
                raise ValueError("non-finite loss in gradient check")
            numeric = (loss_hi - loss_lo) / (np.float64(hi) - np.float64(lo))
            ana = float(g.reshape(-1)[k])
            denom = max(abs(numeric), abs(ana), 1e-3)
            max_rel = max(max_rel, abs(numeric - ana) / denom)
    return max_rel
