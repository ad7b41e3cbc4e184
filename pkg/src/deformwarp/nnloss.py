"""Nearest-neighbour feature loss, its brute-force reference, and related losses.

Volumes are (height, width, channels). For every position p of the generated
volume the loss takes the smallest L1 distance to the target volume over an
n x n window around p, and sums those minima without normalisation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError
from . import layers


@dataclass(frozen=True)
class NeighborhoodSpec:
    n: int = 3

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise InvalidArgumentError(f"neighbourhood side must be odd and >= 1, got {self.n}")

    @property
    def radius(self) -> int:
        return (self.n - 1) // 2

    def offsets(self) -> list[tuple[int, int]]:
        """(row, col) offsets in scan order: row ascending, then column ascending."""
        r = self.radius
        return [(i, j) for i in range(-r, r + 1) for j in range(-r, r + 1)]


def _as_spec(nb) -> NeighborhoodSpec:
    return nb if isinstance(nb, NeighborhoodSpec) else NeighborhoodSpec(int(nb))


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 3:
        raise InvalidArgumentError(f"volumes must share one (h, w, c) shape, got {a.shape} and {b.shape}")
    return a, b


def channel_sum(d: np.ndarray) -> np.ndarray:
    # Fixed left-to-right order so every caller rounds identically.
    s = d[..., 0].copy()
    for c in range(1, d.shape[-1]):
        s += d[..., c]
    return s


def nn_loss_bruteforce(C_hat, C_b, nb) -> float:
    """Reference: explicit loop over positions, window restricted to the image."""
    C_hat, C_b = _check_pair(C_hat, C_b)
    nb = _as_spec(nb)
    h, w, _ = C_hat.shape
    r = nb.radius
    minima = []
    for y in range(h):
        for x in range(w):
            best = math.inf
            for i in range(-r, r + 1):
                for j in range(-r, r + 1):
                    qy, qx = y + i, x + j
                    if 0 <= qy < h and 0 <= qx < w:
                        d = float(channel_sum(np.abs(C_hat[y, x] - C_b[qy, qx])))
                        if d < best:
                            best = d
            minima.append(best)
    return math.fsum(minima)


def shifted_distances(C_hat, C_b, nb) -> np.ndarray:
    """S[k] = per-pixel L1 distance to C_b shifted by the k-th offset.

    Offsets reaching outside the image hold the largest finite value of the
    dtype, so they never win the minimum.
    """
    C_hat, C_b = _check_pair(C_hat, C_b)
    nb = _as_spec(nb)
    h, w, c = C_hat.shape
    big = np.finfo(np.result_type(C_hat, C_b, np.float32)).max
    S = np.full((nb.n * nb.n, h, w), big, dtype=np.result_type(C_hat, C_b, np.float32))
    for k, (i, j) in enumerate(nb.offsets()):
        # p = (y, x) compares against C_b(y + i, x + j)
        y0, y1 = max(0, -i), min(h, h - i)
        x0, x1 = max(0, -j), min(w, w - j)
        if y0 >= y1 or x0 >= x1:
            continue
        d = np.abs(C_hat[y0:y1, x0:x1] - C_b[y0 + i:y1 + i, x0 + j:x1 + j])
        S[k, y0:y1, x0:x1] = channel_sum(d)
    return S


def nn_loss_shifted(C_hat, C_b, nb) -> tuple[float, np.ndarray]:
    """Loss via n^2 shifted copies of C_b. Returns (loss, argmin offsets (h, w, 2))."""
    nb = _as_spec(nb)
    S = shifted_distances(C_hat, C_b, nb)
    k = np.argmin(S, axis=0)
    M = np.take_along_axis(S, k[None], axis=0)[0]
    offsets = np.array(nb.offsets(), dtype=np.int64)
    return math.fsum(M.ravel().tolist()), offsets[k]


def nn_loss(C_hat, C_b, nb) -> float:
    return nn_loss_shifted(C_hat, C_b, nb)[0]


def nn_loss_backward(grad: float, argmin, C_hat, C_b) -> np.ndarray:
    """Subgradient w.r.t. C_hat: grad * sign(C_hat(p) - C_b(p + offset(p)))."""
    C_hat, C_b = _check_pair(C_hat, C_b)
    argmin = np.asarray(argmin)
    h, w, _ = C_hat.shape
    if argmin.shape != (h, w, 2):
        raise InvalidStateError(f"argmin field {argmin.shape} does not match volume {(h, w)}")
    ys, xs = np.mgrid[0:h, 0:w]
    qy = ys + argmin[..., 0]
    qx = xs + argmin[..., 1]
    if qy.min() < 0 or qy.max() >= h or qx.min() < 0 or qx.max() >= w:
        raise InvalidStateError("argmin field points outside the volume")
    return (grad * np.sign(C_hat - C_b[qy, qx])).astype(C_hat.dtype, copy=False)


def l1_loss(x_hat, x_b) -> float:
    x_hat, x_b = _check_same(x_hat, x_b)
    return float(np.abs(x_hat - x_b).sum())


def l1_loss_backward(grad: float, x_hat, x_b) -> np.ndarray:
    return (grad * np.sign(np.asarray(x_hat) - np.asarray(x_b))).astype(np.asarray(x_hat).dtype, copy=False)


def perceptual_elementwise_loss(C_hat, C_b) -> float:
    """Feature-space L1 without any neighbourhood search (the n = 1 case)."""
    C_hat, C_b = _check_pair(C_hat, C_b)
    return math.fsum(channel_sum(np.abs(C_hat - C_b)).ravel().tolist())


def perceptual_elementwise_backward(grad: float, C_hat, C_b) -> np.ndarray:
    return l1_loss_backward(grad, C_hat, C_b)


def _check_same(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


class FeatureExtractor:
    """Frozen stand-in for a pretrained first conv block: two 3x3 stride-1 conv+ReLU layers.

    The receptive field is 5x5 and the output keeps the input resolution.
    Weights come from a fixed seed unless supplied explicitly, e.g. loaded from
    a tensor container holding ``conv1/w``, ``conv1/b``, ``conv2/w``, ``conv2/b``
    in (k, k, c_in, c_out) layout.
    """

    def __init__(self, channels: int = 16, seed: int = 1234, weights: dict | None = None,
                 dtype=np.float64):
        if weights is None:
            rng = np.random.default_rng(seed)
            weights = {
                "conv1/w": rng.normal(0, math.sqrt(2 / 27), (3, 3, 3, channels)),
                "conv1/b": rng.normal(0, 0.05, channels),
                "conv2/w": rng.normal(0, math.sqrt(2 / (9 * channels)), (3, 3, channels, channels)),
                "conv2/b": rng.normal(0, 0.05, channels),
            }
        for name in ("conv1/w", "conv1/b", "conv2/w", "conv2/b"):
            if name not in weights:
                raise InvalidArgumentError(f"feature extractor weights missing '{name}'")
        w1, w2 = weights["conv1/w"], weights["conv2/w"]
        if w1.shape[:3] != (3, 3, 3) or w2.shape[:2] != (3, 3) or w2.shape[2] != w1.shape[3]:
            raise InvalidArgumentError(f"unexpected conv shapes {w1.shape}, {w2.shape}")
        self.weights = {k: np.asarray(v, dtype=dtype) for k, v in weights.items()}

    @property
    def channels(self) -> int:
        return self.weights["conv2/w"].shape[3]

    def astype(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor(weights=self.weights, dtype=dtype)

    def forward(self, x: np.ndarray):
        """x: (h, w, 3) or (b, h, w, 3). Returns (features, ctx)."""
        single = x.ndim == 3
        xb = x[None] if single else x
        y1, c1 = layers.conv2d_forward(xb, self.weights["conv1/w"], self.weights["conv1/b"], 1, 1)
        r1 = np.maximum(y1, 0)
        y2, c2 = layers.conv2d_forward(r1, self.weights["conv2/w"], self.weights["conv2/b"], 1, 1)
        out = np.maximum(y2, 0)
        ctx = (single, c1, y1, c2, y2)
        return (out[0] if single else out), ctx

    def backward(self, ctx, grad: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the input image; weights stay frozen."""
        single, c1, y1, c2, y2 = ctx
        g = grad[None] if single else grad
        g = g * (y2 > 0)
        g = layers.conv2d_backward_input(c2, g)
        g = g * (y1 > 0)
        g = layers.conv2d_backward_input(c1, g)
        return g[0] if single else g

    def __call__(self, x):
        return self.forward(x)[0]


def extract_features(image, extractor: FeatureExtractor | None = None) -> np.ndarray:
    if extractor is None:
        extractor = _default_extractor()
    return extractor(np.asarray(image, dtype=np.float64))


_DEFAULT = None


def _default_extractor() -> FeatureExtractor:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = FeatureExtractor()
    return _DEFAULT
