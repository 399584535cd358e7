"""Dense NCHW tensor kernels.

Values are plain numpy arrays of float32 or float64, laid out N x C x H x W
for image-like data. Every op here is a pure function: it validates shapes,
computes the forward result, and leaves its inputs untouched. Reverse-mode
rules live in :mod:`mlcseg.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-D convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    has_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be >= 1, got {self.in_channels}->{self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError(f"kernel/stride/dilation must be >= 1, got {self.kernel}/{self.stride}/{self.dilation}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels) + self.kernel

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output extents: floor((X + 2p - d*(k-1) - 1)/s) + 1 per axis."""
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (ph, pw), (dh, dw) = self.padding, self.dilation
        ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if ho < 1 or wo < 1:
            raise ValueError(
                f"conv output extent not positive: input {h}x{w} with kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}, dilation {self.dilation} "
                f"gives {ho}x{wo}"
            )
        return ho, wo


def check_nchw(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 NCHW, got shape {x.shape}")
    if x.dtype not in FLOAT_DTYPES:
        raise ValueError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


def im2col(x: np.ndarray, spec: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Unfold NCHW input into (N, C*kh*kw, Hout*Wout) patch columns."""
    n, c, h, w = x.shape
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    (ph, pw), (dh, dw) = spec.padding, spec.dilation
    ho, wo = spec.out_hw(h, w)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i * dh : i * dh + sh * ho : sh, j * dw : j * dw + sw * wo : sw]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def col2im(cols: np.ndarray, x_shape, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    """Fold (N, C*kh*kw, Hout*Wout) columns back, accumulating overlaps."""
    n, c, h, w = x_shape
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    (ph, pw), (dh, dw) = spec.padding, spec.dilation
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * dh : i * dh + sh * ho : sh, j * dw : j * dw + sw * wo : sw] += cols[:, :, i, j]
    if ph or pw:
        out = out[:, :, ph : ph + h, pw : pw + w]
    return out


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Strided, dilated, zero-padded cross-correlation (no kernel flip)."""
    out, _ = conv2d_with_cols(x, weight, bias, spec)
    return out


def conv2d_with_cols(x, weight, bias, spec: ConvSpec):
    x = check_nchw(x)
    weight = np.asarray(weight)
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels} (input {x.shape})")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} does not match spec {spec.weight_shape}")
    if x.dtype != weight.dtype:
        raise ValueError(f"input dtype {x.dtype} != weight dtype {weight.dtype}")
    if spec.has_bias:
        if bias is None or np.asarray(bias).shape != (spec.out_channels,):
            got = None if bias is None else np.asarray(bias).shape
            raise ValueError(f"bias shape {got} does not match ({spec.out_channels},)")
    elif bias is not None:
        raise ValueError("bias given but spec.has_bias is False")
    n = x.shape[0]
    cols, ho, wo = im2col(x, spec)
    w2 = weight.reshape(spec.out_channels, -1)
    out = np.matmul(w2, cols).reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + np.asarray(bias)[None, :, None, None]
    return out, cols


def _interp_axis(length: int, out_length: int, dtype):
    """Align-corners source indices and fractional weights for one axis."""
    if out_length == 1 or length == 1:
        lo = np.zeros(out_length, dtype=np.intp)
        return lo, lo.copy(), np.zeros(out_length, dtype=dtype)
    src = np.arange(out_length, dtype=np.float64) * (length - 1) / (out_length - 1)
    lo = np.floor(src).astype(np.intp)
    frac = src - lo
    # Integer hits keep frac 0 so source samples pass through bit-exactly.
    over = lo >= length - 1
    lo[over] = length - 1
    frac[over] = 0.0
    hi = np.minimum(lo + 1, length - 1)
    return lo, hi, frac.astype(dtype)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear interpolation to an arbitrary spatial size.

    Uses the lerp form a + w*(b - a) so constant inputs are reproduced
    bit-exactly.
    """
    x = check_nchw(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    ylo, yhi, fy = _interp_axis(h, out_h, x.dtype)
    rows = x[:, :, ylo, :] + fy[None, None, :, None] * (x[:, :, yhi, :] - x[:, :, ylo, :])
    xlo, xhi, fx = _interp_axis(w, out_w, x.dtype)
    return rows[:, :, :, xlo] + fx[None, None, None, :] * (rows[:, :, :, xhi] - rows[:, :, :, xlo])


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Integer-factor align-corners bilinear upsampling; factor 1 is identity."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    x = check_nchw(x)
    return bilinear_resize(x, x.shape[2] * int(factor), x.shape[3] * int(factor))


def interp_matrix(length: int, out_length: int, dtype=np.float64) -> np.ndarray:
    """Dense (out_length, length) matrix form of align-corners interpolation."""
    lo, hi, frac = _interp_axis(length, out_length, np.float64)
    m = np.zeros((out_length, length), dtype=dtype)
    idx = np.arange(out_length)
    np.add.at(m, (idx, lo), 1.0 - frac)
    np.add.at(m, (idx, hi), frac)
    return m


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize with the same align-corners index mapping."""
    x = check_nchw(x)
    h, w = x.shape[2:]
    ys = np.round(np.arange(out_h) * ((h - 1) / (out_h - 1) if out_h > 1 else 0.0)).astype(np.intp)
    xs = np.round(np.arange(out_w) * ((w - 1) / (out_w - 1) if out_w > 1 else 0.0)).astype(np.intp)
    return x[:, :, ys, :][:, :, :, xs]


def concat_channels(inputs) -> np.ndarray:
    """Concatenate along the channel axis; batch and spatial extents must agree."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    arrs = [check_nchw(t, f"input {i}") for i, t in enumerate(inputs)]
    first = arrs[0]
    for i, a in enumerate(arrs[1:], start=1):
        if a.shape[0] != first.shape[0] or a.shape[2:] != first.shape[2:]:
            raise ValueError(f"concat mismatch: input 0 has shape {first.shape}, input {i} has shape {a.shape}")
    return np.concatenate(arrs, axis=1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


# Clamp keeps sigmoid strictly inside (0, 1) even where exp underflows.
SIGMOID_CLAMP = 1e-7


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return np.asarray(x) * c


def dropout_mask(shape, rate: float, rng, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout keep mask: 0 with probability rate, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = np.random.default_rng(rng)
    keep = rng.random(shape) >= rate
    d = np.dtype(dtype)
    return keep.astype(d) / d.type(1.0 - rate)


def dropout(x: np.ndarray, rate: float, rng, training: bool) -> np.ndarray:
    """Inverted dropout; the inference path is the identity."""
    x = np.asarray(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x.copy()
    return x * dropout_mask(x.shape, rate, rng, dtype=x.dtype)


BN_EPS = 1e-5


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over the N, H, W axes."""
    x = check_nchw(x)
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def batchnorm_apply(x, gamma, beta, mean, var, eps=BN_EPS):
    """Normalize with the given per-channel statistics, then scale and shift."""
    x = check_nchw(x)
    gamma, beta = np.asarray(gamma), np.asarray(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    inv_std = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (x - np.asarray(mean)[None, :, None, None]) * inv_std[None, :, None, None]
    return xhat * gamma[None, :, None, None] + beta[None, :, None, None], xhat, inv_std


def batchnorm2d(x, gamma, beta, running_mean=None, running_var=None,
                training=True, momentum=0.1, eps=BN_EPS) -> np.ndarray:
    """Per-channel normalization by batch (training) or running (inference) stats.

    In training mode the running arrays, when given, are updated in place with
    an exponential moving average of the batch statistics.
    """
    if training:
        mean, var = channel_stats(x)
        out, _, _ = batchnorm_apply(x, gamma, beta, mean, var, eps)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.astype(running_mean.dtype)
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var.astype(running_var.dtype)
        return out
    if running_mean is None or running_var is None:
        raise ValueError("inference-mode batchnorm needs running statistics")
    out, _, _ = batchnorm_apply(x, gamma, beta, running_mean, running_var, eps)
    return out
