"""Hand-differentiated layers on (batch, height, width, channels) arrays.

Every forward returns ``(output, ctx)``; the matching backward consumes the
ctx. Strided convolutions use 4x4 kernels with padding 1 so stride 2 exactly
halves (conv) or doubles (transposed conv) the spatial size; stride-1
convolutions use 3x3 kernels with padding 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import InvalidArgumentError, InvalidStateError

IN_EPS = 1e-5
INIT_STD = 0.02

KINDS = ("conv", "upconv", "instance_norm", "relu", "tanh", "sigmoid", "dropout", "concat")


def kernel_for_stride(stride: int) -> int:
    return 4 if stride == 2 else 3


def _check4(x, what="input"):
    if x.ndim != 4 or min(x.shape) < 1:
        raise InvalidArgumentError(f"{what} must be a non-empty (b, h, w, c) array, got {x.shape}")


def _im2col(xp, k, s, ho, wo):
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    view = as_strided(xp, (b, ho, wo, k, k, c), (sb, sh * s, sw * s, sh, sw, sc), writeable=False)
    return view.reshape(b * ho * wo, k * k * c)


def _col2im(cols, padded_shape, k, s, ho, wo, dtype):
    b, _, _, c = padded_shape
    out = np.zeros(padded_shape, dtype=dtype)
    cols = cols.reshape(b, ho, wo, k, k, c)
    for ki in range(k):
        for kj in range(k):
            out[:, ki:ki + s * (ho - 1) + 1:s, kj:kj + s * (wo - 1) + 1:s, :] += cols[:, :, :, ki, kj, :]
    return out


# -- convolution ---------------------------------------------------------------

def conv2d_forward(x, w, b, stride, pad):
    """w: (k, k, c_in, c_out)."""
    _check4(x)
    k, _, cin, cout = w.shape
    if x.shape[3] != cin:
        raise InvalidArgumentError(f"conv expects {cin} input channels, got {x.shape[3]}")
    bsz, h, wd, _ = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    y = (cols @ w.reshape(-1, cout) + b).reshape(bsz, ho, wo, cout)
    return y, (x.shape, xp.shape, cols, w, stride, pad)


def conv2d_backward_input(ctx, g):
    x_shape, xp_shape, _, w, stride, pad = ctx
    k, _, _, cout = w.shape
    if stride == 1 and pad <= k - 1:
        # stride-1 adjoint is a correlation of g with the flipped, channel-swapped kernel
        wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        gx, _ = conv2d_forward(g, wf, np.zeros(wf.shape[3], dtype=g.dtype), 1, k - 1 - pad)
        return gx
    _, ho, wo, _ = g.shape
    gcols = g.reshape(-1, cout) @ w.reshape(-1, cout).T
    gxp = _col2im(gcols, xp_shape, k, stride, ho, wo, g.dtype)
    return gxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2], :]


def conv2d_backward(ctx, g):
    x_shape, xp_shape, cols, w, stride, pad = ctx
    cout = w.shape[3]
    g2 = g.reshape(-1, cout)
    gw = (cols.T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    return conv2d_backward_input(ctx, g), gw, gb


def conv_transpose2d_forward(x, w, b, stride, pad):
    """Adjoint of a strided conv. w: (k, k, c_out, c_in)."""
    _check4(x)
    k, _, cout, cin = w.shape
    if x.shape[3] != cin:
        raise InvalidArgumentError(f"upconv expects {cin} input channels, got {x.shape[3]}")
    bsz, h, wd, _ = x.shape
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    wm = w.reshape(k * k * cout, cin)
    cols = x.reshape(-1, cin) @ wm.T
    padded = (bsz, ho + 2 * pad, wo + 2 * pad, cout)
    yp = _col2im(cols, padded, k, stride, h, wd, x.dtype)
    y = yp[:, pad:pad + ho, pad:pad + wo, :] + b
    return y, (x, w, stride, pad)


def conv_transpose2d_backward(ctx, g):
    x, w, stride, pad = ctx
    k, _, cout, cin = w.shape
    bsz, h, wd, _ = x.shape
    gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else g
    gcols = _im2col(np.ascontiguousarray(gp), k, stride, h, wd)
    wm = w.reshape(k * k * cout, cin)
    gx = (gcols @ wm).reshape(x.shape)
    gw = (gcols.T @ x.reshape(-1, cin)).reshape(w.shape)
    gb = g.sum(axis=(0, 1, 2))
    return gx, gw, gb


# -- normalisation and pointwise ---------------------------------------------

def instance_norm_forward(x, gamma, beta, eps=IN_EPS):
    _check4(x)
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def instance_norm_backward(ctx, g):
    xhat, inv_std, gamma = ctx
    n = xhat.shape[1] * xhat.shape[2]
    dgamma = (g * xhat).sum(axis=(0, 1, 2))
    dbeta = g.sum(axis=(0, 1, 2))
    dxhat = g * gamma
    s1 = dxhat.sum(axis=(1, 2), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
    dx = inv_std / n * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- layer specs -----------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    stride: int = 1
    kernel: int = 0
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown layer kind '{self.kind}'")
        if self.kind in ("conv", "upconv"):
            if self.stride not in (1, 2):
                raise InvalidArgumentError(f"stride must be 1 or 2, got {self.stride}")
            if self.kernel == 0:
                object.__setattr__(self, "kernel", kernel_for_stride(self.stride))

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "upconv", "instance_norm")


def block(notation: str, filters: int, stride: int, up: bool = False, last: str = "relu") -> list[LayerSpec]:
    """Expand C / CN / CD block notation: conv -> [norm] -> [dropout] -> activation."""
    if notation not in ("C", "CN", "CD"):
        raise InvalidArgumentError(f"unknown block notation '{notation}'")
    kind = "upconv" if (up and stride == 2) else "conv"
    specs = [LayerSpec(kind, filters, stride)]
    if notation in ("CN", "CD"):
        specs.append(LayerSpec("instance_norm", filters))
    if notation == "CD":
        specs.append(LayerSpec("dropout", dropout_rate=0.5))
    specs.append(LayerSpec(last))
    return specs


def init_params(spec: LayerSpec, in_channels: int, rng: np.random.Generator, dtype=np.float64) -> dict:
    k = spec.kernel
    if spec.kind == "conv":
        return {"w": rng.normal(0, INIT_STD, (k, k, in_channels, spec.filters)).astype(dtype),
                "b": np.zeros(spec.filters, dtype=dtype)}
    if spec.kind == "upconv":
        return {"w": rng.normal(0, INIT_STD, (k, k, spec.filters, in_channels)).astype(dtype),
                "b": np.zeros(spec.filters, dtype=dtype)}
    if spec.kind == "instance_norm":
        return {"gamma": np.ones(in_channels, dtype=dtype), "beta": np.zeros(in_channels, dtype=dtype)}
    return {}


def out_channels(spec: LayerSpec, in_channels: int) -> int:
    return spec.filters if spec.kind in ("conv", "upconv") else in_channels


def _rng(rng):
    if rng is None or isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def layer_forward(spec: LayerSpec, params: dict, x, mode: str = "train", rng=None) -> tuple[Any, tuple]:
    """Run one layer. ``x`` is a list of arrays for ``concat``. ``rng`` is a Generator or a seed."""
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    kind = spec.kind
    if kind == "concat":
        xs = list(x)
        if len({a.shape[:3] for a in xs}) != 1:
            raise InvalidArgumentError("concat inputs must share batch and spatial dims")
        return np.concatenate(xs, axis=3), (kind, [a.shape[3] for a in xs])
    _check4(x)
    if kind == "conv":
        pad = 1
        y, c = conv2d_forward(x, params["w"], params["b"], spec.stride, pad)
        return y, (kind, c)
    if kind == "upconv":
        y, c = conv_transpose2d_forward(x, params["w"], params["b"], spec.stride, 1)
        return y, (kind, c)
    if kind == "instance_norm":
        if params["gamma"].shape != (x.shape[3],):
            raise InvalidArgumentError(f"instance norm has {params['gamma'].shape[0]} channels, input {x.shape[3]}")
        y, c = instance_norm_forward(x, params["gamma"], params["beta"])
        return y, (kind, c)
    if kind == "relu":
        return np.maximum(x, 0), (kind, x > 0)
    if kind == "tanh":
        y = np.tanh(x)
        return y, (kind, y)
    if kind == "sigmoid":
        y = sigmoid(x)
        return y, (kind, y)
    # dropout
    if mode == "eval" or spec.dropout_rate == 0:
        return x, (kind, None)
    gen = _rng(rng)
    if gen is None:
        raise InvalidArgumentError("train-mode dropout needs an rng")
    keep = 1.0 - spec.dropout_rate
    scale = (gen.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * scale, (kind, scale)


def layer_backward(ctx: tuple, grad_out) -> tuple[Any, dict]:
    """Returns (grad wrt input, grad wrt params). ``concat`` returns a list of input grads."""
    kind, c = ctx
    if kind == "concat":
        if grad_out.shape[3] != sum(c):
            raise InvalidStateError(f"concat grad has {grad_out.shape[3]} channels, expected {sum(c)}")
        return np.split(grad_out, np.cumsum(c)[:-1], axis=3), {}
    if kind == "conv":
        gx, gw, gb = conv2d_backward(c, grad_out)
        return gx, {"w": gw, "b": gb}
    if kind == "upconv":
        gx, gw, gb = conv_transpose2d_backward(c, grad_out)
        return gx, {"w": gw, "b": gb}
    if kind == "instance_norm":
        if c[0].shape != grad_out.shape:
            raise InvalidStateError(f"grad {grad_out.shape} does not match forward {c[0].shape}")
        gx, gg, gb = instance_norm_backward(c, grad_out)
        return gx, {"gamma": gg, "beta": gb}
    if kind == "relu":
        return grad_out * c, {}
    if kind == "tanh":
        return grad_out * (1 - c * c), {}
    if kind == "sigmoid":
        return grad_out * c * (1 - c), {}
    if kind == "dropout":
        return (grad_out if c is None else grad_out * c), {}
    raise InvalidStateError(f"unknown ctx kind {kind!r}")


class Sequential:
    """A named chain of single-input layers with parameters kept in a ParamStore."""

    def __init__(self, name: str, specs: list[LayerSpec]):
        self.name = name
        self.specs = list(specs)

    def param_name(self, i: int, key: str) -> str:
        return f"{self.name}/{i}/{key}"

    def init(self, in_channels: int, rng, params: dict, dtype) -> int:
        c = in_channels
        for i, spec in enumerate(self.specs):
            for key, val in init_params(spec, c, rng, dtype).items():
                params[self.param_name(i, key)] = val
            c = out_channels(spec, c)
        return c

    def _layer_params(self, params, i):
        keys = ("gamma", "beta") if self.specs[i].kind == "instance_norm" else ("w", "b")
        return {k: params[self.param_name(i, k)] for k in keys}

    def forward(self, params, x, mode="train", rng=None):
        ctxs = []
        for i, spec in enumerate(self.specs):
            p = self._layer_params(params, i) if spec.has_params else {}
            x, c = layer_forward(spec, p, x, mode, rng)
            ctxs.append(c)
        return x, ctxs

    def backward(self, ctxs, g, grads: dict, need_input: bool = True):
        """Accumulates parameter grads into ``grads`` and returns the input grad.

        With ``need_input=False`` the first layer skips its input gradient and
        None is returned.
        """
        for i in range(len(self.specs) - 1, -1, -1):
            if i == 0 and not need_input and ctxs[0][0] == "conv":
                _, _, cols, w, _, _ = ctxs[0][1]
                g2 = g.reshape(-1, w.shape[3])
                gp = {"w": (cols.T @ g2).reshape(w.shape), "b": g2.sum(axis=0)}
                g = None
            else:
                g, gp = layer_backward(ctxs[i], g)
            for key, val in gp.items():
                name = self.param_name(i, key)
                if name in grads:
                    grads[name] = grads[name] + val
                else:
                    grads[name] = val
        return g
