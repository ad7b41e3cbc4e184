"""Masked per-part feature warping and max-merge, forward and backward.

Feature maps are (height, width, channels) arrays. Warping is inverse: the
output at q samples the masked input at f^-1(q) with bilinear weights, and
samples falling outside the source grid read zero. Each warp is a sparse
linear operator, so the backward pass is its transpose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .affine import AffineParams, fit_affine, invert_affine, scale_affine
from .errors import (DegenerateGeometryError, InvalidArgumentError, InvalidStateError,
                     SingularTransformError)
from .pose import NUM_PARTS, Part, RegionMask, RegionSet, apply_symmetry_fallback, region_mask, scale_mask

SINGULAR_DET = 1e-8


def _check_feature_map(F) -> np.ndarray:
    F = np.asarray(F)
    if F.ndim != 3:
        raise InvalidArgumentError(f"feature map must be (height, width, channels), got shape {F.shape}")
    return F


def warp_operator(mask: np.ndarray, params: AffineParams) -> sp.csr_matrix:
    """Sparse (h*w, h*w) matrix W with vec(out) = W @ vec(F) for one masked part."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if abs(np.linalg.det(params.A)) < SINGULAR_DET:
        raise SingularTransformError(f"affine transform is not invertible: {params.k}")
    inv = invert_affine(params)
    ys, xs = np.mgrid[0:h, 0:w]
    tx = inv.a11 * xs + inv.a12 * ys + inv.tx
    ty = inv.a21 * xs + inv.a22 * ys + inv.ty
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx = tx - x0
    fy = ty - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out_idx = (ys * w + xs).ravel()

    rows, cols, vals = [], [], []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        sx = (x0 + dx).ravel()
        sy = (y0 + dy).ravel()
        wt = wt.ravel()
        ok = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h) & (wt != 0)
        ok[ok] &= mask[sy[ok], sx[ok]] != 0
        rows.append(out_idx[ok])
        cols.append(sy[ok] * w + sx[ok])
        vals.append(wt[ok])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w)
    )


def deform_masked(F, mask: RegionMask, params: AffineParams) -> np.ndarray:
    """Warp F * M by ``params``; all channels of a pixel move together."""
    F = _check_feature_map(F)
    h, w, c = F.shape
    if mask.values.shape != (h, w):
        raise InvalidArgumentError(f"mask {mask.values.shape} does not match feature map {(h, w)}")
    W = warp_operator(mask.values, params)
    return np.asarray(W @ F.reshape(h * w, c)).reshape(h, w, c).astype(F.dtype, copy=False)


def merge_max(parts: Sequence[np.ndarray], return_argmax: bool = False):
    """Elementwise max over parts; ties go to the lowest index."""
    if len(parts) == 0:
        raise InvalidArgumentError("merge_max needs at least one input")
    shape = np.shape(parts[0])
    if any(np.shape(p) != shape for p in parts):
        raise InvalidArgumentError("merge_max inputs must share one shape")
    stack = np.stack(parts)
    idx = np.argmax(stack, axis=0)
    out = np.take_along_axis(stack, idx[None], axis=0)[0]
    return (out, idx) if return_argmax else out


@dataclass
class WarpPlan:
    """Per-part (transform, mask) pairs at one feature resolution.

    ``params[h]`` maps conditioning-image coordinates to target coordinates,
    already rescaled to this resolution; it is None exactly when the mask is
    all zero.
    """

    params: tuple
    masks: tuple
    _ops: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.params) != NUM_PARTS or len(self.masks) != NUM_PARTS:
            raise InvalidArgumentError(f"a warp plan has {NUM_PARTS} entries")
        params, masks = list(self.params), list(self.masks)
        for h in range(NUM_PARTS):
            if params[h] is None or not masks[h].values.any():
                params[h] = None
                masks[h] = RegionMask(np.zeros_like(masks[h].values), Part(h))
        self.params, self.masks = tuple(params), tuple(masks)

    @property
    def size(self) -> tuple[int, int]:
        return self.masks[0].values.shape

    def operators(self, dtype=np.float64) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """Stacked (parts*h*w, h*w) operator and its transpose, built once per dtype."""
        dtype = np.dtype(dtype)
        if dtype not in self._ops:
            h, w = self.size
            blocks = []
            for p, m in zip(self.params, self.masks):
                blocks.append(sp.csr_matrix((h * w, h * w)) if p is None else warp_operator(m.values, p))
            op = sp.vstack(blocks, format="csr").astype(dtype)
            self._ops[dtype] = (op, op.T.tocsr())
        return self._ops[dtype]

    def active_parts(self) -> list[Part]:
        return [Part(h) for h, p in enumerate(self.params) if p is not None]


def build_warp_plan(regions_a: RegionSet, regions_b: RegionSet, image_size: tuple[int, int],
                    feature_size: tuple[int, int], symmetry: bool = True) -> WarpPlan:
    """Fit f_h at image resolution, then rescale transforms and masks to ``feature_size``.

    Sizes are (height, width). Parts whose fit is degenerate or whose transform
    is singular are left empty.
    """
    H, W = image_size
    h, w = feature_size
    if symmetry:
        regions_a = apply_symmetry_fallback(regions_a, regions_b)
    params, masks = [], []
    for part in Part:
        ra, rb = regions_a[part], regions_b[part]
        p = None
        if not ra.empty and not rb.empty:
            try:
                p = fit_affine(ra.corners, rb.corners)
                if abs(np.linalg.det(p.A)) < SINGULAR_DET:
                    p = None
            except DegenerateGeometryError:
                p = None
        if p is None:
            masks.append(RegionMask(np.zeros((h, w), dtype=np.uint8), part))
        else:
            masks.append(scale_mask(region_mask(ra, W, H), w, h))
            p = scale_affine(p, w / W, h / H)
        params.append(p)
    return WarpPlan(tuple(params), tuple(masks))


def deform(F, plan: WarpPlan) -> tuple[np.ndarray, np.ndarray]:
    """d(F): warp every masked part and max-merge. Returns (d(F), argmax part index)."""
    F = _check_feature_map(F)
    h, w, c = F.shape
    if plan.size != (h, w):
        raise InvalidArgumentError(f"plan resolution {plan.size} does not match feature map {(h, w)}")
    op, _ = plan.operators(F.dtype)
    stack = np.asarray(op @ F.reshape(h * w, c)).reshape(NUM_PARTS, h * w, c)
    idx = np.argmax(stack, axis=0)
    out = np.take_along_axis(stack, idx[None], axis=0)[0]
    return out.reshape(h, w, c).astype(F.dtype, copy=False), idx.reshape(h, w, c)


def deform_backward(grad_out, plan: WarpPlan, F, saved_argmax) -> np.ndarray:
    """dL/dF given dL/d(d(F)) and the argmax recorded by :func:`deform`."""
    grad_out = _check_feature_map(grad_out)
    F = np.asarray(F)
    saved_argmax = np.asarray(saved_argmax)
    h, w, c = grad_out.shape
    if F.shape != grad_out.shape or saved_argmax.shape != grad_out.shape or plan.size != (h, w):
        raise InvalidStateError(
            f"backward shapes disagree: grad {grad_out.shape}, F {F.shape}, "
            f"argmax {saved_argmax.shape}, plan {plan.size}"
        )
    _, op_t = plan.operators(grad_out.dtype)
    routed = np.zeros((NUM_PARTS, h * w, c), dtype=grad_out.dtype)
    np.put_along_axis(routed, saved_argmax.reshape(1, h * w, c), grad_out.reshape(1, h * w, c), axis=0)
    gF = op_t @ routed.reshape(NUM_PARTS * h * w, c)
    return np.asarray(gF).reshape(h, w, c).astype(grad_out.dtype, copy=False)
