"""Reverse-mode differentiation over the tensor kernels.

A :class:`Tape` records each op as a node (op name, input value ids, output
value id, saved arrays) in execution order, which is already topological.
``backward`` walks the nodes in reverse, dispatching to the one backward rule
registered per op name, and returns a gradient set: a dict mapping each named
leaf to a gradient array of the same shape. Leaves the loss never touched get
zero gradients.

Running with ``recording=False`` gives the same forward math with no graph,
which is the inference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import ConvSpec

BACKWARD_RULES: dict = {}


def register_backward(op_name: str):
    def deco(fn):
        BACKWARD_RULES[op_name] = fn
        return fn
    return deco


class Var:
    """Handle to one value on a tape."""

    __slots__ = ("vid", "data")

    def __init__(self, vid: int, data: np.ndarray):
        self.vid = vid
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(vid={self.vid}, shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class Node:
    op: str
    in_vids: tuple
    out_vid: int
    ctx: dict = field(default_factory=dict)


class Tape:
    def __init__(self, recording: bool = True):
        self.recording = recording
        self._values: list[np.ndarray] = []
        self._nodes: list[Node] = []
        self._leaves: dict[str, int] = {}

    def _wrap(self, data: np.ndarray) -> Var:
        self._values.append(data)
        return Var(len(self._values) - 1, data)

    def const(self, data) -> Var:
        """Track an input that needs no gradient."""
        return self._wrap(np.asarray(data))

    def leaf(self, name: str, data) -> Var:
        """Track a named trainable leaf; its gradient appears in backward()."""
        if name in self._leaves:
            raise ValueError(f"leaf '{name}' already registered")
        v = self._wrap(np.asarray(data))
        self._leaves[name] = v.vid
        return v

    def apply(self, op: str, inputs, out_data, ctx=None) -> Var:
        """Record one computed op; generic hook for externally defined ops."""
        out = self._wrap(out_data)
        if self.recording:
            self._nodes.append(Node(op, tuple(v.vid for v in inputs), out.vid, ctx or {}))
        return out

    # Taped tensor ops

    def conv2d(self, x: Var, w: Var, b: Var | None, spec: ConvSpec) -> Var:
        out, cols = tensor.conv2d_with_cols(x.data, w.data, None if b is None else b.data, spec)
        inputs = (x, w) if b is None else (x, w, b)
        return self.apply("conv2d", inputs, out,
                          {"cols": cols, "x_shape": x.data.shape, "weight": w.data,
                           "spec": spec, "out_hw": out.shape[2:]})

    def bilinear_upsample(self, x: Var, factor: int) -> Var:
        out = tensor.bilinear_upsample(x.data, factor)
        return self.apply("bilinear_upsample", (x,), out,
                          {"in_hw": x.data.shape[2:], "out_hw": out.shape[2:], "dtype": x.data.dtype})

    def concat_channels(self, xs) -> Var:
        out = tensor.concat_channels([v.data for v in xs])
        return self.apply("concat_channels", tuple(xs), out,
                          {"channels": [v.data.shape[1] for v in xs]})

    def relu(self, x: Var) -> Var:
        return self.apply("relu", (x,), tensor.relu(x.data), {"x": x.data})

    def sigmoid(self, x: Var) -> Var:
        out = tensor.sigmoid(x.data)
        return self.apply("sigmoid", (x,), out, {"y": out})

    def add(self, a: Var, b: Var) -> Var:
        return self.apply("add", (a, b), tensor.add(a.data, b.data))

    def scale(self, x: Var, c: float) -> Var:
        return self.apply("scale", (x,), tensor.scale(x.data, c), {"c": c})

    def dropout(self, x: Var, rate: float, rng, training: bool) -> Var:
        if not training:
            return self.apply("dropout", (x,), tensor.dropout(x.data, rate, rng, False), {"mask": None})
        mask = tensor.dropout_mask(x.data.shape, rate, rng, dtype=x.data.dtype)
        return self.apply("dropout", (x,), x.data * mask, {"mask": mask})

    def batchnorm2d(self, x: Var, gamma: Var, beta: Var, running_mean, running_var,
                    training: bool, momentum: float = 0.1, eps: float = tensor.BN_EPS) -> Var:
        if training:
            mean, var = tensor.channel_stats(x.data)
            out, xhat, inv_std = tensor.batchnorm_apply(x.data, gamma.data, beta.data, mean, var, eps)
            if running_mean is not None:
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean.astype(running_mean.dtype)
            if running_var is not None:
                running_var *= 1.0 - momentum
                running_var += momentum * var.astype(running_var.dtype)
        else:
            if running_mean is None or running_var is None:
                raise ValueError("inference-mode batchnorm needs running statistics")
            out, xhat, inv_std = tensor.batchnorm_apply(x.data, gamma.data, beta.data,
                                                        running_mean, running_var, eps)
        return self.apply("batchnorm2d", (x, gamma, beta), out,
                          {"xhat": xhat, "inv_std": inv_std, "gamma": gamma.data, "training": training})

    def sum(self, x: Var) -> Var:
        out = np.asarray(x.data.sum(), dtype=x.data.dtype)
        return self.apply("sum", (x,), out, {"shape": x.data.shape, "dtype": x.data.dtype})

    def mean(self, x: Var) -> Var:
        out = np.asarray(x.data.mean(), dtype=x.data.dtype)
        return self.apply("mean", (x,), out, {"shape": x.data.shape, "dtype": x.data.dtype})

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradient of a scalar loss with respect to every named leaf."""
        if not self.recording:
            raise ValueError("backward() on a non-recording tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.vid: np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.get(node.out_vid)
            if g is None:
                continue
            rule = BACKWARD_RULES.get(node.op)
            if rule is None:
                raise ValueError(f"no backward rule registered for op '{node.op}'")
            contribs = rule(node.ctx, g)
            for vid, contrib in zip(node.in_vids, contribs):
                if contrib is None:
                    continue
                prev = grads.get(vid)
                grads[vid] = contrib if prev is None else prev + contrib
        out = {}
        for name, vid in self._leaves.items():
            g = grads.get(vid)
            out[name] = np.zeros_like(self._values[vid]) if g is None else g
        return out


@register_backward("conv2d")
def _conv2d_backward(ctx, g):
    spec: ConvSpec = ctx["spec"]
    n = g.shape[0]
    ho, wo = ctx["out_hw"]
    g2 = g.reshape(n, spec.out_channels, ho * wo)
    cols = ctx["cols"]
    w2 = ctx["weight"].reshape(spec.out_channels, -1)
    dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(ctx["weight"].shape)
    dcols = np.matmul(w2.T, g2)
    dx = tensor.col2im(dcols, ctx["x_shape"], spec, ho, wo)
    if spec.has_bias:
        return dx, dw, g.sum(axis=(0, 2, 3))
    return dx, dw


@register_backward("bilinear_upsample")
def _upsample_backward(ctx, g):
    (h, w), (ho, wo) = ctx["in_hw"], ctx["out_hw"]
    mh = tensor.interp_matrix(h, ho, dtype=ctx["dtype"])
    mw = tensor.interp_matrix(w, wo, dtype=ctx["dtype"])
    return (np.einsum("ih,ncij,jw->nchw", mh, g, mw),)


@register_backward("concat_channels")
def _concat_backward(ctx, g):
    return tuple(np.split(g, np.cumsum(ctx["channels"])[:-1], axis=1))


@register_backward("relu")
def _relu_backward(ctx, g):
    # Subgradient at 0 is 0.
    return (g * (ctx["x"] > 0),)


@register_backward("sigmoid")
def _sigmoid_backward(ctx, g):
    y = ctx["y"]
    return (g * y * (1.0 - y),)


@register_backward("add")
def _add_backward(ctx, g):
    return g, g


@register_backward("scale")
def _scale_backward(ctx, g):
    return (g * ctx["c"],)


@register_backward("dropout")
def _dropout_backward(ctx, g):
    mask = ctx["mask"]
    return (g if mask is None else g * mask,)


@register_backward("batchnorm2d")
def _batchnorm_backward(ctx, g):
    xhat, inv_std, gamma = ctx["xhat"], ctx["inv_std"], ctx["gamma"]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    coeff = (gamma * inv_std)[None, :, None, None]
    if not ctx["training"]:
        return g * coeff, dgamma, dbeta
    g_mean = g.mean(axis=(0, 2, 3), keepdims=True)
    gx_mean = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
    dx = coeff * (g - g_mean - xhat * gx_mean)
    return dx, dgamma, dbeta


@register_backward("sum")
def _sum_backward(ctx, g):
    return (np.full(ctx["shape"], float(g), dtype=ctx["dtype"]),)


@register_backward("mean")
def _mean_backward(ctx, g):
    size = int(np.prod(ctx["shape"]))
    return (np.full(ctx["shape"], float(g) / size, dtype=ctx["dtype"]),)


def finite_diff_grad(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        hi = float(f(x))
        flat_x[i] = orig - eps
        lo = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max over elements of |a-b| / max(|a|, |b|, 1e-8)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max())
