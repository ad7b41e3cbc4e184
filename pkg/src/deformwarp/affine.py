"""Per-part affine transforms fitted between corresponding region rectangles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, InvalidArgumentError

DEGENERATE_DET = 1e-12


@dataclass(frozen=True)
class AffineParams:
    """f(p) = A p + t with A = [[a11, a12], [a21, a22]] and t = (tx, ty)."""

    a11: float
    a12: float
    tx: float
    a21: float
    a22: float
    ty: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.k)):
            raise InvalidArgumentError(f"affine parameters must be finite: {self.k}")

    @classmethod
    def from_vector(cls, k) -> "AffineParams":
        return cls(*(float(v) for v in k))

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    @property
    def k(self) -> np.ndarray:
        return np.array([self.a11, self.a12, self.tx, self.a21, self.a22, self.ty])

    @property
    def A(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])

    @property
    def t(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        return np.array([[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty], [0.0, 0.0, 1.0]])


def fit_affine(src, dst) -> AffineParams:
    """Least-squares affine map taking the 4 ``src`` corners onto ``dst``.

    Each output coordinate is an independent 3-unknown problem sharing the
    normal matrix X^T X, where X rows are (x, y, 1).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise InvalidArgumentError(f"expected two sets of 4 points, got {src.shape} and {dst.shape}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise InvalidArgumentError("corner coordinates must be finite")
    X = np.column_stack([src, np.ones(4)])
    N = X.T @ X
    if abs(np.linalg.det(N)) < DEGENERATE_DET:
        raise DegenerateGeometryError("source corners are collinear or coincident")
    row_x = np.linalg.solve(N, X.T @ dst[:, 0])
    row_y = np.linalg.solve(N, X.T @ dst[:, 1])
    return AffineParams.from_vector(np.concatenate([row_x, row_y]))


def apply_affine(params: AffineParams, p) -> np.ndarray:
    """Apply to one point (2,) or a batch of points (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ params.A.T + params.t


def scale_affine(params: AffineParams, sx: float, sy: float) -> AffineParams:
    """Conjugate by S = diag(sx, sy): returns S f S^-1 for use on a resampled grid."""
    if not (sx > 0 and sy > 0):
        raise InvalidArgumentError(f"scale factors must be positive, got ({sx}, {sy})")
    A = params.A
    return AffineParams(
        A[0, 0], A[0, 1] * sx / sy, params.tx * sx,
        A[1, 0] * sy / sx, A[1, 1], params.ty * sy,
    )


def invert_affine(params: AffineParams) -> AffineParams:
    A_inv = np.linalg.inv(params.A)
    t_inv = -A_inv @ params.t
    return AffineParams(A_inv[0, 0], A_inv[0, 1], t_inv[0], A_inv[1, 0], A_inv[1, 1], t_inv[1])


def compose_affine(f: AffineParams, g: AffineParams) -> AffineParams:
    """Return f o g."""
    m = f.matrix() @ g.matrix()
    return AffineParams(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])
